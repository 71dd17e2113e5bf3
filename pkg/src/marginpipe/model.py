"""Mini residual CNN with per-block embeddings and a sigmoid head.

Each block downsamples with a stride-2 conv, runs conv-norm-relu-conv-norm,
adds the downsampled input back, and applies a final ReLU. The pooled
output of every block is exposed as that block's embedding vector; the last
block's pooled output feeds a linear projection (the final embedding) and a
one-neuron sigmoid head. Checkpoints round-trip parameters bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    ShapeError,
)
from .numerics import DTYPE, Graph

_MAGIC = b"FFCL"
_VERSION = 1

STAGES = ("initialized", "local-pretrained", "global-pretrained", "finetuned")


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    base_channels: int = 16
    embedding_dim: int = 64
    input_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.input_size % (2**self.num_blocks) != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^{self.num_blocks}"
            )

    def block_channels(self, i: int) -> int:
        return self.base_channels * (2**i)


@dataclass
class BlockEmbeddings:
    per_block: list[np.ndarray]
    final: np.ndarray


class Model:
    """Parameter store plus config; forward passes build a fresh tape."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], stage: str = "initialized"):
        if stage not in STAGES:
            raise ContractError(f"unknown training stage {stage!r}")
        self.config = config
        self.params = params
        self.stage = stage

    def parameter_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def block_param_names(self) -> list[str]:
        return [name for name in self.params if name.startswith("blocks.")]


def _kaiming_uniform(rng, shape, fan_in) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(DTYPE)


def build_model(config: ModelConfig) -> Model:
    """Initialize all parameters deterministically from config.seed."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    c_prev = 1
    for i in range(config.num_blocks):
        c = config.block_channels(i)
        pre = f"blocks.{i}"
        params[f"{pre}.down.w"] = _kaiming_uniform(rng, (c, c_prev, 3, 3), c_prev * 9)
        params[f"{pre}.down.b"] = np.zeros(c, dtype=DTYPE)
        params[f"{pre}.conv1.w"] = _kaiming_uniform(rng, (c, c, 3, 3), c * 9)
        params[f"{pre}.conv1.b"] = np.zeros(c, dtype=DTYPE)
        params[f"{pre}.norm1.gamma"] = np.ones(c, dtype=DTYPE)
        params[f"{pre}.norm1.beta"] = np.zeros(c, dtype=DTYPE)
        params[f"{pre}.conv2.w"] = _kaiming_uniform(rng, (c, c, 3, 3), c * 9)
        params[f"{pre}.conv2.b"] = np.zeros(c, dtype=DTYPE)
        params[f"{pre}.norm2.gamma"] = np.ones(c, dtype=DTYPE)
        params[f"{pre}.norm2.beta"] = np.zeros(c, dtype=DTYPE)
        c_prev = c
    c_last = config.block_channels(config.num_blocks - 1)
    params["projection.w"] = _kaiming_uniform(rng, (config.embedding_dim, c_last), c_last)
    params["projection.b"] = np.zeros(config.embedding_dim, dtype=DTYPE)
    params["head.w"] = _kaiming_uniform(rng, (1, config.embedding_dim), config.embedding_dim)
    params["head.b"] = np.zeros(1, dtype=DTYPE)
    return Model(config, params)


def _wanted_params(model: Model, want: str) -> list[str]:
    names = model.block_param_names()
    if want in ("embed", "classify"):
        names += ["projection.w", "projection.b"]
    if want == "classify":
        names += ["head.w", "head.b"]
    return names


def register_params(g: Graph, model: Model, want: str) -> dict[str, int]:
    """Put the parameters a forward mode needs onto the tape, once.

    Registering once and running several forward passes through the same
    node map is how contrastive pair losses share weights.
    """
    if want not in ("blocks", "embed", "classify"):
        raise ContractError(f"unknown forward mode {want!r}")
    return {name: g.param(name, model.params[name]) for name in _wanted_params(model, want)}


def run_forward(
    g: Graph,
    param_nodes: dict[str, int],
    config: ModelConfig,
    x: np.ndarray,
    want: str = "classify",
    detach_between_blocks: bool = False,
) -> dict:
    """Record one batched forward pass against already-registered params.

    ``want`` selects how deep the tape goes: "blocks" stops at per-block
    embeddings, "embed" adds the projection, "classify" adds the head
    logit and probability. With ``detach_between_blocks`` each block sees
    a gradient-stopped copy of its input, so one backward pass yields
    purely block-local gradients.
    """
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected batched input [B,1,H,W], got {x.shape}")
    h = g.const(x)
    block_embeds: list[int] = []
    for i in range(config.num_blocks):
        pre = f"blocks.{i}"
        if detach_between_blocks and i > 0:
            h = g.detach(h)
        down = g.conv2d(
            h, param_nodes[f"{pre}.down.w"], param_nodes[f"{pre}.down.b"], stride=2, padding=1
        )
        body = g.conv2d(
            down, param_nodes[f"{pre}.conv1.w"], param_nodes[f"{pre}.conv1.b"], stride=1, padding=1
        )
        body = g.group_norm(
            body, param_nodes[f"{pre}.norm1.gamma"], param_nodes[f"{pre}.norm1.beta"], groups=1
        )
        body = g.relu(body)
        body = g.conv2d(
            body, param_nodes[f"{pre}.conv2.w"], param_nodes[f"{pre}.conv2.b"], stride=1, padding=1
        )
        body = g.group_norm(
            body, param_nodes[f"{pre}.norm2.gamma"], param_nodes[f"{pre}.norm2.beta"], groups=1
        )
        h = g.relu(g.add(body, down))
        block_embeds.append(g.gap(h))
    nodes = {"block_embeds": block_embeds}
    if want in ("embed", "classify"):
        final = g.linear(block_embeds[-1], param_nodes["projection.w"], param_nodes["projection.b"])
        nodes["final_embed"] = final
        if want == "classify":
            logit = g.linear(final, param_nodes["head.w"], param_nodes["head.b"])
            nodes["logit"] = logit
            nodes["prob"] = g.sigmoid(logit)
    return nodes


def forward_graph(
    model: Model,
    x: np.ndarray,
    want: str = "classify",
    detach_between_blocks: bool = False,
    dtype=DTYPE,
):
    """Fresh tape + one forward pass; returns (graph, named nodes)."""
    g = Graph(dtype)
    param_nodes = register_params(g, model, want)
    nodes = run_forward(g, param_nodes, model.config, x, want, detach_between_blocks)
    return g, nodes


def _check_patch(model: Model, patch: np.ndarray) -> np.ndarray:
    arr = np.asarray(patch, dtype=DTYPE)
    size = model.config.input_size
    if arr.shape != (1, size, size):
        raise ShapeError(f"expected patch of shape (1, {size}, {size}), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError("patch values must lie in [0,1]")
    return arr[None]


def forward_embed(model: Model, patch: np.ndarray) -> BlockEmbeddings:
    """Per-block pooled embeddings plus the projected final embedding."""
    x = _check_patch(model, patch)
    g, nodes = forward_graph(model, x, want="embed")
    per_block = [g.value(nid)[0].copy() for nid in nodes["block_embeds"]]
    final = g.value(nodes["final_embed"])[0].copy()
    return BlockEmbeddings(per_block=per_block, final=final)


def forward_classify(model: Model, patch: np.ndarray) -> float:
    """Positive-class probability, kept strictly inside (0,1)."""
    x = _check_patch(model, patch)
    g, nodes = forward_graph(model, x, want="classify")
    p = float(g.value(nodes["prob"])[0, 0])
    return float(np.clip(p, 1e-12, 1.0 - 1e-12))


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(model: Model, path) -> None:
    """magic, version, length-prefixed config JSON, then named f32 tensors."""
    header = {"config": dataclasses.asdict(model.config), "stage": model.stage}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(model.params)))
        for name, tensor in model.params.items():
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", tensor.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    """Inverse of save_checkpoint; never returns a partially read model."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    if len(view) < 4 or bytes(view[:4]) != _MAGIC:
        raise CheckpointMagicError(f"{path} does not start with {_MAGIC!r}")
    if len(view) < 12:
        raise CheckpointTruncatedError(f"{path} shorter than its fixed header")
    version, header_len = struct.unpack("<II", view[4:12])
    if version != _VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {_VERSION}")
    offset = 12
    if len(view) < offset + header_len + 4:
        raise CheckpointTruncatedError(f"{path} header truncated")
    try:
        header = json.loads(bytes(view[offset : offset + header_len]))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} header is not valid JSON: {exc}") from exc
    offset += header_len
    (count,) = struct.unpack("<I", view[offset : offset + 4])
    offset += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(view) < offset + 2:
            raise CheckpointTruncatedError(f"{path} tensor name truncated")
        (name_len,) = struct.unpack("<H", view[offset : offset + 2])
        offset += 2
        if len(view) < offset + name_len + 1:
            raise CheckpointTruncatedError(f"{path} tensor name truncated")
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack("<B", view[offset : offset + 1])
        offset += 1
        if len(view) < offset + 8 * ndim:
            raise CheckpointTruncatedError(f"{path} tensor dims truncated")
        dims = struct.unpack(f"<{ndim}Q", view[offset : offset + 8 * ndim])
        offset += 8 * ndim
        n_bytes = int(np.prod(dims, dtype=np.int64)) * 4 if ndim else 4
        if len(view) < offset + n_bytes:
            raise CheckpointTruncatedError(f"{path} tensor data truncated")
        tensor = np.frombuffer(view[offset : offset + n_bytes], dtype="<f4").reshape(dims)
        offset += n_bytes
        if name in params:
            raise CheckpointError(f"duplicate tensor name {name!r} in {path}")
        params[name] = tensor.copy()
    config = ModelConfig(**header["config"])
    return Model(config, params, stage=header["stage"])
