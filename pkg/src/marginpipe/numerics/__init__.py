"""Dense tensor core: forward primitives, a replayable autodiff tape,
Adam with cosine annealing, and a finite-difference gradient checker.

Tensors are plain C-contiguous numpy arrays. Single precision is the
working dtype for parameters and activations; float64 is used for loss
accumulation and as the evaluation mode for gradient checks.
"""

from .graph import Graph, Node, backward
from .gradcheck import finite_difference_gradcheck
from .ops import (
    DTYPE,
    as_tensor,
    check_finite,
    conv2d_forward,
    conv_output_hw,
    global_avg_pool_forward,
    group_norm_forward,
    linear_forward,
    relu_forward,
    sigmoid,
)
from .optim import AdamState, adam_init, adam_step, cosine_anneal_lr

__all__ = [
    "DTYPE",
    "AdamState",
    "Graph",
    "Node",
    "adam_init",
    "adam_step",
    "as_tensor",
    "backward",
    "check_finite",
    "conv2d_forward",
    "conv_output_hw",
    "cosine_anneal_lr",
    "finite_difference_gradcheck",
    "global_avg_pool_forward",
    "group_norm_forward",
    "linear_forward",
    "relu_forward",
    "sigmoid",
]
