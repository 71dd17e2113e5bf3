"""Two-stage margin assessment: patch classification with contrastive
pretraining, coarse-mask reconstruction, and prompt-driven refinement."""

__version__ = "0.1.0"
