"""Replayable autodiff tape.

A :class:`Graph` records one op per call in execution order; node ids are
indices into that order, so topological order is the recording order by
construction. ``backward`` walks the tape in reverse and returns gradients
keyed by parameter name without mutating any recorded value. ``replay``
re-executes the tape with substituted parameter values, which is what the
finite-difference checker uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, ShapeError
from . import ops
from .ops import DTYPE


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    meta: dict = field(default_factory=dict)


def _fw_elementwise(op):
    return {
        "relu": lambda x: np.maximum(x, 0),
        "sigmoid": ops._sigmoid_same_dtype,
        "softplus": ops._softplus,
        "sqrt": np.sqrt,
        "neg": np.negative,
    }[op]


_FORWARD = {
    "conv2d": lambda v, m: ops._bconv2d(v[0], v[1], v[2], m["stride"], m["padding"]),
    "group_norm": lambda v, m: ops._bgroup_norm(v[0], v[1], v[2], m["groups"], m["eps"]),
    "linear": lambda v, m: ops._blinear(v[0], v[1], v[2]),
    "gap": lambda v, m: ops._bgap(v[0]),
    "relu": lambda v, m: np.maximum(v[0], 0),
    "sigmoid": lambda v, m: ops._sigmoid_same_dtype(v[0]),
    "softplus": lambda v, m: ops._softplus(v[0]),
    "sqrt": lambda v, m: np.sqrt(v[0]),
    "neg": lambda v, m: -v[0],
    "add": lambda v, m: v[0] + v[1],
    "mul": lambda v, m: v[0] * v[1],
    "scale": lambda v, m: v[0] * m["factor"],
    "add_const": lambda v, m: v[0] + m["offset"],
    "pow_const": lambda v, m: v[0] ** m["exponent"],
    "sum": lambda v, m: np.asarray(v[0].sum(), dtype=v[0].dtype),
    "rowsum": lambda v, m: v[0].sum(axis=1),
    "reshape": lambda v, m: v[0].reshape(m["shape"]),
    "detach": lambda v, m: v[0],
}


def _grad_conv2d(values, out, grad, meta):
    return ops._bconv2d_grad(values[0], values[1], values[2], grad, meta["stride"], meta["padding"])


def _grad_group_norm(values, out, grad, meta):
    return ops._bgroup_norm_grad(values[0], values[1], values[2], grad, meta["groups"], meta["eps"])


_BACKWARD = {
    "conv2d": _grad_conv2d,
    "group_norm": _grad_group_norm,
    "linear": lambda v, o, g, m: ops._blinear_grad(v[0], v[1], g),
    "gap": lambda v, o, g, m: (ops._bgap_grad(v[0], g),),
    "relu": lambda v, o, g, m: (g * (v[0] > 0),),
    "sigmoid": lambda v, o, g, m: (g * o * (1 - o),),
    "softplus": lambda v, o, g, m: (g * ops._sigmoid_same_dtype(v[0]),),
    "sqrt": lambda v, o, g, m: (g * 0.5 / o,),
    "neg": lambda v, o, g, m: (-g,),
    "add": lambda v, o, g, m: (g, g),
    "mul": lambda v, o, g, m: (g * v[1], g * v[0]),
    "scale": lambda v, o, g, m: (g * m["factor"],),
    "add_const": lambda v, o, g, m: (g,),
    "pow_const": lambda v, o, g, m: (g * m["exponent"] * v[0] ** (m["exponent"] - 1),),
    "sum": lambda v, o, g, m: (np.broadcast_to(g, v[0].shape).astype(v[0].dtype, copy=True),),
    "rowsum": lambda v, o, g, m: (np.broadcast_to(g[:, None], v[0].shape).astype(v[0].dtype, copy=True),),
    "reshape": lambda v, o, g, m: (g.reshape(v[0].shape),),
    "detach": lambda v, o, g, m: (None,),
}


class Graph:
    """Define-by-run tape over numpy arrays of a fixed dtype."""

    def __init__(self, dtype=DTYPE):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.param_ids: dict[str, int] = {}

    # -- leaves ------------------------------------------------------------

    def param(self, name: str, value) -> int:
        if name in self.param_ids:
            raise ContractError(f"parameter {name!r} already registered")
        nid = self._record("param", (), np.asarray(value, dtype=self.dtype), name=name)
        self.param_ids[name] = nid
        return nid

    def const(self, value) -> int:
        return self._record("const", (), np.asarray(value, dtype=self.dtype))

    # -- ops ---------------------------------------------------------------

    def conv2d(self, x: int, w: int, b: int, *, stride: int = 1, padding: int = 0) -> int:
        return self._apply("conv2d", (x, w, b), stride=stride, padding=padding)

    def group_norm(self, x: int, gamma: int, beta: int, *, groups: int = 1, eps: float = 1e-5) -> int:
        return self._apply("group_norm", (x, gamma, beta), groups=groups, eps=eps)

    def linear(self, x: int, w: int, b: int) -> int:
        return self._apply("linear", (x, w, b))

    def gap(self, x: int) -> int:
        return self._apply("gap", (x,))

    def relu(self, x: int) -> int:
        return self._apply("relu", (x,))

    def sigmoid(self, x: int) -> int:
        return self._apply("sigmoid", (x,))

    def softplus(self, x: int) -> int:
        return self._apply("softplus", (x,))

    def sqrt(self, x: int) -> int:
        return self._apply("sqrt", (x,))

    def neg(self, x: int) -> int:
        return self._apply("neg", (x,))

    def add(self, a: int, b: int) -> int:
        if self.nodes[a].value.shape != self.nodes[b].value.shape:
            raise ShapeError("add requires identical shapes")
        return self._apply("add", (a, b))

    def mul(self, a: int, b: int) -> int:
        if self.nodes[a].value.shape != self.nodes[b].value.shape:
            raise ShapeError("mul requires identical shapes")
        return self._apply("mul", (a, b))

    def scale(self, x: int, factor: float) -> int:
        return self._apply("scale", (x,), factor=float(factor))

    def add_const(self, x: int, offset: float) -> int:
        return self._apply("add_const", (x,), offset=float(offset))

    def pow_const(self, x: int, exponent: float) -> int:
        return self._apply("pow_const", (x,), exponent=float(exponent))

    def sum(self, x: int) -> int:
        return self._apply("sum", (x,))

    def rowsum(self, x: int) -> int:
        if self.nodes[x].value.ndim != 2:
            raise ShapeError("rowsum expects a 2-D input")
        return self._apply("rowsum", (x,))

    def reshape(self, x: int, shape: tuple[int, ...]) -> int:
        return self._apply("reshape", (x,), shape=tuple(shape))

    def detach(self, x: int) -> int:
        """Forward identity whose backward blocks all gradient flow."""
        return self._apply("detach", (x,))

    # -- access ------------------------------------------------------------

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def validate(self) -> None:
        """Check the recorded-parameter invariant: each param feeds >= 1 op."""
        used = {i for node in self.nodes for i in node.inputs}
        orphans = [name for name, nid in self.param_ids.items() if nid not in used]
        if orphans:
            raise ContractError(f"parameters never consumed by any op: {orphans}")

    # -- engine ------------------------------------------------------------

    def _record(self, op, inputs, value, **meta) -> int:
        self.nodes.append(Node(op, tuple(inputs), value, meta))
        return len(self.nodes) - 1

    def _apply(self, op, inputs, **meta) -> int:
        values = [self.nodes[i].value for i in inputs]
        return self._record(op, inputs, _FORWARD[op](values, meta), **meta)

    def backward(self, loss: int) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of a scalar loss node, keyed by parameter name.

        The graph itself is left untouched; adjoint buffers are local.
        """
        if self.nodes[loss].value.ndim != 0 and self.nodes[loss].value.size != 1:
            raise ContractError(f"loss node must be scalar, has shape {self.nodes[loss].value.shape}")
        adj: dict[int, np.ndarray] = {loss: np.ones_like(self.nodes[loss].value)}
        for nid in range(loss, -1, -1):
            g = adj.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op in ("param", "const"):
                if node.op == "param":
                    adj[nid] = g  # keep terminal gradients for collection
                continue
            values = [self.nodes[i].value for i in node.inputs]
            in_grads = _BACKWARD[node.op](values, node.value, g, node.meta)
            for src, ig in zip(node.inputs, in_grads):
                if ig is None:
                    continue
                if src in adj:
                    adj[src] = adj[src] + ig
                else:
                    adj[src] = ig
        grads = {}
        for name, nid in self.param_ids.items():
            if nid <= loss:
                grads[name] = adj.get(nid, np.zeros_like(self.nodes[nid].value))
        return grads

    def replay(self, loss: int, param_overrides: dict[str, np.ndarray]) -> float:
        """Recompute the value of ``loss`` with some parameter leaves replaced."""
        values: list[np.ndarray] = []
        for nid, node in enumerate(self.nodes[: loss + 1]):
            if node.op == "param":
                override = param_overrides.get(node.meta["name"])
                values.append(
                    node.value if override is None else np.asarray(override, dtype=self.dtype)
                )
            elif node.op == "const":
                values.append(node.value)
            else:
                values.append(_FORWARD[node.op]([values[i] for i in node.inputs], node.meta))
        return float(np.asarray(values[loss]).reshape(()))


def backward(graph: Graph, loss: int) -> dict[str, np.ndarray]:
    """Module-level alias of :meth:`Graph.backward`."""
    return graph.backward(loss)
