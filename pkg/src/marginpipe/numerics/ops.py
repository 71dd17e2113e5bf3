"""Forward primitives and their batched kernels.

The public ``*_forward`` functions implement the documented single-sample
contracts ([C,H,W] activations). The private ``_b*`` kernels operate on
batched [N,C,H,W] / [N,F] arrays and are shared with the autodiff tape in
:mod:`marginpipe.numerics.graph`; gradients are validated against central
finite differences, not against a second analytic route.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericsError, ShapeError

DTYPE = np.float32


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Materialize data as a C-contiguous array of the working dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")
    return x


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def conv_output_hw(h: int, w: int, k: int, padding: int, stride: int) -> tuple[int, int]:
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------------------
# batched kernels (forward + backward), shared with the tape


def _bconv2d(x, w, b, stride, padding):
    n, c, h, ww = x.shape
    f, c2, k, k2 = w.shape
    if c != c2 or k != k2:
        raise ShapeError(f"kernel {w.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if b.shape != (f,):
        raise ShapeError(f"bias shape {b.shape} != ({f},)")
    if padding == 0 and (h < k or ww < k):
        raise ShapeError(f"input {h}x{ww} smaller than kernel {k} with no padding")
    ho, wo = conv_output_hw(h, ww, k, padding, stride)
    if ho < 1 or wo < 1:
        raise ShapeError("convolution output would be empty")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [n,c,ho,wo,k,k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(f, -1).T + b
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def _bconv2d_grad(x, w, b, grad, stride, padding):
    n, c, h, ww = x.shape
    f, _, k, _ = w.shape
    ho, wo = grad.shape[2], grad.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    gm = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    dw = (gm.T @ cols).reshape(w.shape)
    db = gm.sum(axis=0)
    dcols = (gm @ w.reshape(f, -1)).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros_like(xp)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += dcols[
                :, :, :, :, ki, kj
            ]
    dx = dxp[:, :, padding : padding + h, padding : padding + ww] if padding else dxp
    return np.ascontiguousarray(dx), dw, db


def _bgroup_norm(x, gamma, beta, groups, eps):
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("affine parameters must be per-channel vectors")
    xr = x.reshape(n, groups, -1)
    mu = xr.mean(axis=2, keepdims=True)
    var = xr.var(axis=2, keepdims=True)
    xhat = ((xr - mu) / np.sqrt(var + eps)).reshape(x.shape)
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def _bgroup_norm_grad(x, gamma, beta, grad, groups, eps):
    n, c, h, w = x.shape
    m = (c // groups) * h * w
    xr = x.reshape(n, groups, m)
    mu = xr.mean(axis=2, keepdims=True)
    var = xr.var(axis=2, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (xr - mu) * istd
    dxhat = (grad * gamma[None, :, None, None]).reshape(n, groups, m)
    dgamma = (grad * xhat.reshape(x.shape)).sum(axis=(0, 2, 3))
    dbeta = grad.sum(axis=(0, 2, 3))
    dx = (istd / m) * (
        m * dxhat - dxhat.sum(axis=2, keepdims=True) - xhat * (dxhat * xhat).sum(axis=2, keepdims=True)
    )
    return np.ascontiguousarray(dx.reshape(x.shape)), dgamma, dbeta


def _blinear(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w.T + b


def _blinear_grad(x, w, grad):
    return grad @ w, grad.T @ x, grad.sum(axis=0)


def _bgap(x):
    if x.ndim != 4:
        raise ShapeError(f"global average pool expects [N,C,H,W], got {x.shape}")
    return x.mean(axis=(2, 3))


def _bgap_grad(x, grad):
    n, c, h, w = x.shape
    return np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape).astype(x.dtype, copy=True)


def _softplus(x):
    # log(1 + e^x) without overflow for large |x|
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_same_dtype(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# single-sample contracts


def conv2d_forward(x, kernel, bias, padding: int = 0, stride: int = 1) -> np.ndarray:
    """Cross-correlate a [C_in,H,W] input with a [C_out,C_in,k,k] kernel.

    Output spatial size is floor((H + 2*padding - k)/stride) + 1.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [C,H,W] input, got shape {x.shape}")
    return _bconv2d(x[None], np.asarray(kernel), np.asarray(bias), stride, padding)[0]


def relu_forward(x) -> np.ndarray:
    """Elementwise max(0, x)."""
    x = np.asarray(x)
    return np.maximum(x, 0)


def group_norm_forward(x, gamma, beta, groups: int = 1, eps: float = 1e-5) -> np.ndarray:
    """Normalize a [C,H,W] map over channel groups with per-channel affine."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [C,H,W] input, got shape {x.shape}")
    return _bgroup_norm(x[None], np.asarray(gamma), np.asarray(beta), groups, eps)[0]


def global_avg_pool_forward(x) -> np.ndarray:
    """Reduce a [C,H,W] map to a [C] vector of spatial means."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [C,H,W] input, got shape {x.shape}")
    return _bgap(x[None])[0]


def linear_forward(x, weight, bias) -> np.ndarray:
    """Affine map of a length-F vector by a [G,F] weight."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    return _blinear(x[None], np.asarray(weight), np.asarray(bias))[0]
