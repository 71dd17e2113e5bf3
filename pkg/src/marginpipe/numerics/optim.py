"""Adam with bias correction and the cosine-annealing schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import cos, pi

import numpy as np

from ..errors import ContractError, ShapeError


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the schedule bookkeeping."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr0: float = 1e-4
    total_steps: int = field(default=1)  # schedule horizon T


def adam_init(params: dict[str, np.ndarray], lr0: float, total_steps: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        step=0, beta1=beta1, beta2=beta2, eps=eps, lr0=lr0,
        total_steps=max(1, total_steps),
    )


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place; returns ``params``.

    Parameters without a gradient entry are left untouched (their moments
    do not decay either, so a fresh state plus zero/absent gradients is an
    exact fixed point).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


def cosine_anneal_lr(step: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * step/total)) / 2."""
    if total <= 0:
        raise ContractError(f"schedule horizon must be positive, got {total}")
    if step < 0 or step > total:
        raise ContractError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + cos(pi * step / total))
