"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .graph import Graph


def finite_difference_gradcheck(
    graph: Graph,
    loss: int,
    param_names=None,
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between tape gradients and central differences.

    Every coordinate of every checked parameter is perturbed by +/- h and the
    tape is replayed; pass ``max_coords_per_param`` to subsample coordinates of
    large tensors (seeded). Build the graph in float64 for tight tolerances.
    """
    if h <= 0:
        raise ContractError(f"step size must be positive, got {h}")
    analytic = graph.backward(loss)
    names = list(analytic) if param_names is None else list(param_names)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names:
        base = np.array(graph.value(graph.param_ids[name]), dtype=np.float64)
        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        a_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in coords:
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            up = graph.replay(loss, {name: bumped.reshape(base.shape)})
            bumped[i] = flat[i] - h
            down = graph.replay(loss, {name: bumped.reshape(base.shape)})
            fd = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - fd) / max(abs(a_flat[i]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
