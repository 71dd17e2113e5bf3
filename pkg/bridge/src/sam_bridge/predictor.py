"""Prompt-conditioned mask predictors.

A predictor is initialized once per (session, image) pair and then asked
for masks conditioned on a box or on a mask prompt. The mock predictor is
pure geometry: boxes become filled rectangles, mask prompts are echoed
back. It exists so protocol clients can be tested bit for bit without any
model weights. The real predictor loads a promptable-segmenter checkpoint
behind the same interface and is only importable when that runtime is
installed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import BridgeConfig
from .errors import DependencyError


@dataclass(frozen=True)
class PredictorState:
    """Per-(session, image) initialization shared by consecutive prompts."""

    image: np.ndarray


class MockPredictor:
    """Deterministic stand-in: box -> filled rectangle, mask -> echo."""

    backend_id = "mock"
    parameter_count = 0

    def init_state(self, image: np.ndarray) -> PredictorState:
        return PredictorState(image=image)

    def predict_box(self, state: PredictorState, box) -> tuple[np.ndarray, float]:
        """Fill the inclusive [x_min, y_min, x_max, y_max] rectangle.

        The box is clipped to the image; the score is the fraction of the
        requested rectangle that survived clipping.
        """
        h, w = state.image.shape
        x_min, y_min, x_max, y_max = box
        cx_min, cy_min = max(x_min, 0), max(y_min, 0)
        cx_max, cy_max = min(x_max, w - 1), min(y_max, h - 1)
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[cy_min : cy_max + 1, cx_min : cx_max + 1] = 1
        requested = (x_max - x_min + 1) * (y_max - y_min + 1)
        score = float(mask.sum()) / float(requested)
        return mask, score

    def predict_mask(self, state: PredictorState, mask: np.ndarray) -> tuple[np.ndarray, float]:
        return mask.copy(), 1.0


def load_real_predictor(cfg: BridgeConfig):
    """Load a promptable-segmenter checkpoint; raises until the runtime exists.

    The service's contract (and every test against it) is carried by mock
    mode; real checkpoints are an opt-in deployment concern.
    """
    try:
        import torch  # noqa: F401
        import sam2  # noqa: F401
    except ImportError as exc:
        raise DependencyError(
            "real mode needs the segmentation runtime (torch + sam2); "
            "install it or run with mock=True"
        ) from exc
    raise DependencyError(
        f"no loader wired for variant {cfg.variant!r} yet; run with mock=True"
    )
