"""Training engine: goodness utilities, two-stage contrastive pretraining,
and focal-loss fine-tuning.

Both pretraining stages minimize a cosine embedding loss over pairs of
patches: same-class pairs are pulled together (1 - cos), different-class
pairs are pushed apart (max(0, cos)). The local stage applies that loss to
every block's pooled embedding with gradients truncated at block
boundaries, so each block learns from its own output alone; the global
stage backpropagates through the whole network into the final embedding.
Fine-tuning minimizes focal loss on balanced batches with early stopping
on validation loss.

All three stages share one optimizer contract (Adam with cosine-annealed
learning rate) and are bit-reproducible from their seeds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, TrainingError
from .model import Model, forward_classify, register_params, run_forward
from .numerics import (
    DTYPE,
    Graph,
    adam_init,
    adam_step,
    cosine_anneal_lr,
    sigmoid,
)
from .patchflow import balanced_iter, stack_patches

logger = logging.getLogger(__name__)

STAGES = ("local", "global", "finetune")

_COS_EPS = 1e-24


@dataclass(frozen=True)
class ContrastivePair:
    x1: np.ndarray
    x2: np.ndarray
    c1: int
    c2: int

    def __post_init__(self) -> None:
        if self.c1 not in (0, 1) or self.c2 not in (0, 1):
            raise ContractError("pair labels must be 0 or 1")
        if self.x1.shape != self.x2.shape:
            raise ContractError(f"pair shapes differ: {self.x1.shape} vs {self.x2.shape}")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.8
    gamma: float = 3.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0,1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class FfaParams:
    theta: float = 2.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.theta):
            raise ConfigError(f"theta must be finite, got {self.theta}")


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    epochs: int = 50
    batch_size: int = 10
    lr0: float = 1e-4
    patience: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")


@dataclass
class TrainResult:
    model: Model
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


# ---------------------------------------------------------------------------
# standalone loss and goodness utilities


def goodness(h) -> float:
    """Sum of squared activities, G = sum_u h_u^2."""
    arr = np.asarray(h, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ContractError("goodness input must be finite")
    return float(np.sum(arr * arr))


def prob_positive(g_value: float, theta: float) -> float:
    """Logistic probability that activity G exceeds the threshold theta."""
    if not (math.isfinite(g_value) and math.isfinite(theta)):
        raise ContractError("goodness and theta must be finite")
    return float(sigmoid(np.float64(g_value - theta)))


def cosine_embedding_loss(e1, e2, c1: int, c2: int) -> float:
    """Pull same-class embeddings together, push different-class apart.

    same class:      1 - cos(e1, e2)   (range [0, 2])
    different class: max(0, cos(e1, e2))   (range [0, 1])
    """
    a = np.asarray(e1, dtype=np.float64).ravel()
    b = np.asarray(e2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    if c1 not in (0, 1) or c2 not in (0, 1):
        raise ContractError("class labels must be 0 or 1")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine loss undefined for zero-norm embeddings")
    cos = float(a @ b) / (na * nb)
    if c1 == c2:
        return 1.0 - cos
    return max(0.0, cos)


def focal_loss(p: float, y: int, fp: FocalParams) -> float:
    """Class-weighted, hard-example-focused cross entropy of one prediction."""
    if not 0.0 < p < 1.0:
        raise ContractError(f"probability must lie strictly in (0,1), got {p}")
    if y not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {y!r}")
    p_t = p if y == 1 else 1.0 - p
    alpha_t = fp.alpha if y == 1 else 1.0 - fp.alpha
    return -alpha_t * (1.0 - p_t) ** fp.gamma * math.log(p_t)


def predict_patch(model: Model, patch, threshold: float = 0.5) -> tuple[float, int]:
    """Probability plus hard label; ties at the threshold go positive."""
    p = forward_classify(model, patch)
    return p, int(p >= threshold)


# ---------------------------------------------------------------------------
# in-graph losses


def _rows_cosine_loss(g: Graph, e1: int, e2: int, same_mask: np.ndarray) -> int:
    """Mean cosine embedding loss over paired rows of two [B,D] nodes."""
    dot = g.rowsum(g.mul(e1, e2))
    n1 = g.rowsum(g.mul(e1, e1))
    n2 = g.rowsum(g.mul(e2, e2))
    denom = g.sqrt(g.add_const(g.mul(n1, n2), _COS_EPS))
    cos = g.mul(dot, g.pow_const(denom, -1.0))
    same = g.const(same_mask.astype(g.dtype))
    diff = g.const((1.0 - same_mask).astype(g.dtype))
    same_rows = g.mul(same, g.add_const(g.neg(cos), 1.0))
    diff_rows = g.mul(diff, g.relu(cos))
    total = g.sum(g.add(same_rows, diff_rows))
    return g.scale(total, 1.0 / same_mask.size)


def _rows_focal_loss(g: Graph, logit: int, labels: np.ndarray, fp: FocalParams) -> int:
    """Mean focal loss over a [B,1] logit node, composed in logit space.

    With z_t = (2y-1) z: p_t = sigmoid(z_t), 1 - p_t = sigmoid(-z_t) and
    -log p_t = softplus(-z_t), so the focal term never touches log(0).
    """
    y = labels.reshape(-1, 1)
    sign = g.const((2.0 * y - 1.0).astype(g.dtype))
    alpha_t = g.const((fp.alpha * y + (1.0 - fp.alpha) * (1.0 - y)).astype(g.dtype))
    neg_zt = g.neg(g.mul(logit, sign))
    focus = g.pow_const(g.sigmoid(neg_zt), fp.gamma)
    rows = g.mul(alpha_t, g.mul(focus, g.softplus(neg_zt)))
    return g.scale(g.sum(rows), 1.0 / y.size)


def _rows_goodness_loss(g: Graph, embed: int, labels: np.ndarray, theta: float) -> int:
    """Mean logistic loss pushing per-sample goodness across theta by class."""
    z = g.add_const(g.rowsum(g.mul(embed, embed)), -theta)
    sign = g.const((2.0 * labels - 1.0).astype(g.dtype))
    return g.scale(g.sum(g.softplus(g.neg(g.mul(z, sign)))), 1.0 / labels.size)


# ---------------------------------------------------------------------------
# pair sampling


def _split_classes(patches) -> tuple[list, list]:
    pos = [r for r in patches if r.label == 1]
    neg = [r for r in patches if r.label == 0]
    if not pos or not neg:
        raise TrainingError(
            f"contrastive training needs both classes: {len(pos)} positive, {len(neg)} negative"
        )
    return pos, neg


def sample_pair_batch(pos, neg, batch_size: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half same-class pairs, half different-class pairs, drawn uniformly.

    Returns (x1 [B,1,H,W], x2 [B,1,H,W], same_mask [B]).
    """
    half = batch_size // 2
    x1, x2, same = [], [], []
    for _ in range(half):
        side = pos if rng.integers(2) else neg
        i, j = rng.integers(0, len(side), size=2)
        x1.append(side[i].pixels)
        x2.append(side[j].pixels)
        same.append(1.0)
    for _ in range(half):
        i = rng.integers(0, len(pos))
        j = rng.integers(0, len(neg))
        a, b = (pos[i].pixels, neg[j].pixels) if rng.integers(2) else (neg[j].pixels, pos[i].pixels)
        x1.append(a)
        x2.append(b)
        same.append(0.0)
    return (
        np.stack(x1).astype(DTYPE),
        np.stack(x2).astype(DTYPE),
        np.array(same, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# optimization loop plumbing


def _step(graph: Graph, loss_node: int, params, opt_state, trainable, lr, context: str):
    loss_value = float(np.asarray(graph.value(loss_node)).reshape(()))
    if not math.isfinite(loss_value):
        raise TrainingError(f"non-finite loss during {context}")
    grads = graph.backward(loss_node)
    for name in trainable:
        if not np.isfinite(grads[name]).all():
            raise TrainingError(f"non-finite gradient for {name} during {context}")
    adam_step(opt_state, params, {k: grads[k] for k in trainable}, lr=lr)
    return loss_value


def _epoch_seeds(cfg: TrainConfig, n: int) -> list[int]:
    rng = np.random.default_rng(cfg.seed)
    return [int(s) for s in rng.integers(0, 2**31, size=n)]


def pretrain_local(
    model: Model,
    patches,
    cfg: TrainConfig,
    objective: str = "cosine",
    ffa: FfaParams | None = None,
    include_projection: bool = False,
) -> TrainResult:
    """Stage 1: per-block contrastive learning with truncated gradients.

    Each block's pooled embedding gets its own loss; detached block inputs
    keep every gradient inside its block, so one backward pass performs all
    the local updates at once. Only block parameters move (optionally the
    projection as an extra locally-trained stage). The default objective is
    the cosine pair loss; "goodness" switches to the logistic
    goodness-vs-threshold objective on single patches.
    """
    if cfg.stage != "local":
        raise ConfigError(f"expected stage 'local', got {cfg.stage!r}")
    if objective not in ("cosine", "goodness"):
        raise ConfigError(f"unknown local objective {objective!r}")
    ffa = ffa or FfaParams()
    pos, neg = _split_classes(patches)
    n_batches = max(1, math.ceil((len(pos) + len(neg)) / cfg.batch_size))
    total_steps = cfg.epochs * n_batches
    want = "embed" if include_projection else "blocks"
    trainable = model.block_param_names() + (
        ["projection.w", "projection.b"] if include_projection else []
    )
    opt = adam_init({k: model.params[k] for k in trainable}, lr0=cfg.lr0, total_steps=total_steps)
    rng = np.random.default_rng(cfg.seed)
    records = []
    step = 0
    n_blocks = model.config.num_blocks
    for epoch in range(cfg.epochs):
        epoch_losses = np.zeros(n_blocks + int(include_projection))
        epoch_total = 0.0
        for _ in range(n_batches):
            lr = cosine_anneal_lr(step, total_steps, cfg.lr0)
            g = Graph(DTYPE)
            pnodes = register_params(g, model, want)
            if objective == "cosine":
                x1, x2, same = sample_pair_batch(pos, neg, cfg.batch_size, rng)
                out1 = run_forward(g, pnodes, model.config, x1, want, detach_between_blocks=True)
                out2 = run_forward(g, pnodes, model.config, x2, want, detach_between_blocks=True)
                block_losses = [
                    _rows_cosine_loss(g, e1, e2, same)
                    for e1, e2 in zip(out1["block_embeds"], out2["block_embeds"])
                ]
                if include_projection:
                    f1 = g.detach(out1["block_embeds"][-1])
                    f2 = g.detach(out2["block_embeds"][-1])
                    p1 = g.linear(f1, pnodes["projection.w"], pnodes["projection.b"])
                    p2 = g.linear(f2, pnodes["projection.w"], pnodes["projection.b"])
                    block_losses.append(_rows_cosine_loss(g, p1, p2, same))
                    # the shared-weights projection recorded by run_forward is
                    # unused in this mode; its inputs were already consumed
            else:
                batch = _goodness_batch(pos, neg, cfg.batch_size, rng)
                x, y = stack_patches(batch)
                out = run_forward(g, pnodes, model.config, x, want, detach_between_blocks=True)
                block_losses = [
                    _rows_goodness_loss(g, e, y, ffa.theta) for e in out["block_embeds"]
                ]
                if include_projection:
                    proj = g.linear(
                        g.detach(out["block_embeds"][-1]),
                        pnodes["projection.w"],
                        pnodes["projection.b"],
                    )
                    block_losses.append(_rows_goodness_loss(g, proj, y, ffa.theta))
            total = block_losses[0]
            for bl in block_losses[1:]:
                total = g.add(total, bl)
            loss_value = _step(
                g, total, model.params, opt, trainable, lr, f"local epoch {epoch}"
            )
            epoch_losses += [float(np.asarray(g.value(b)).reshape(())) for b in block_losses]
            epoch_total += loss_value
            step += 1
        per_block = (epoch_losses / n_batches).tolist()
        record = {
            "epoch": epoch,
            "stage": "local",
            "train_loss": epoch_total / n_batches,
            "val_loss": None,
            "lr": cosine_anneal_lr(min(step - 1, total_steps), total_steps, cfg.lr0),
            "per_block": per_block,
        }
        records.append(record)
        logger.info(
            "local epoch %d: loss %.6f, per-block %s",
            epoch,
            record["train_loss"],
            ", ".join(f"{v:.6f}" for v in per_block),
        )
    model.stage = "local-pretrained"
    return TrainResult(model=model, records=records)


def _goodness_batch(pos, neg, batch_size: int, rng) -> list:
    half = batch_size // 2
    picks = [pos[i] for i in rng.integers(0, len(pos), size=half)]
    picks += [neg[i] for i in rng.integers(0, len(neg), size=half)]
    order = rng.permutation(batch_size)
    return [picks[i] for i in order]


def pretrain_global(model: Model, patches, cfg: TrainConfig) -> TrainResult:
    """Stage 2: the same pair loss on final embeddings, gradients everywhere."""
    if cfg.stage != "global":
        raise ConfigError(f"expected stage 'global', got {cfg.stage!r}")
    pos, neg = _split_classes(patches)
    n_batches = max(1, math.ceil((len(pos) + len(neg)) / cfg.batch_size))
    total_steps = cfg.epochs * n_batches
    trainable = model.block_param_names() + ["projection.w", "projection.b"]
    opt = adam_init({k: model.params[k] for k in trainable}, lr0=cfg.lr0, total_steps=total_steps)
    rng = np.random.default_rng(cfg.seed)
    records = []
    step = 0
    for epoch in range(cfg.epochs):
        epoch_total = 0.0
        for _ in range(n_batches):
            lr = cosine_anneal_lr(step, total_steps, cfg.lr0)
            x1, x2, same = sample_pair_batch(pos, neg, cfg.batch_size, rng)
            g = Graph(DTYPE)
            pnodes = register_params(g, model, "embed")
            out1 = run_forward(g, pnodes, model.config, x1, "embed")
            out2 = run_forward(g, pnodes, model.config, x2, "embed")
            loss = _rows_cosine_loss(g, out1["final_embed"], out2["final_embed"], same)
            epoch_total += _step(
                g, loss, model.params, opt, trainable, lr, f"global epoch {epoch}"
            )
            step += 1
        record = {
            "epoch": epoch,
            "stage": "global",
            "train_loss": epoch_total / n_batches,
            "val_loss": None,
            "lr": cosine_anneal_lr(min(step - 1, total_steps), total_steps, cfg.lr0),
        }
        records.append(record)
        logger.info("global epoch %d: loss %.6f", epoch, record["train_loss"])
    model.stage = "global-pretrained"
    return TrainResult(model=model, records=records)


def _mean_focal_loss(model: Model, patches, fp: FocalParams, chunk: int = 64) -> float:
    """Mean focal loss over a patch set, evaluated without gradients."""
    recs = list(patches)
    total = 0.0
    for start in range(0, len(recs), chunk):
        x, y = stack_patches(recs[start : start + chunk])
        g = Graph(DTYPE)
        pnodes = register_params(g, model, "classify")
        out = run_forward(g, pnodes, model.config, x, "classify")
        loss = _rows_focal_loss(g, out["logit"], y, fp)
        total += float(np.asarray(g.value(loss)).reshape(())) * len(y)
    return total / len(recs)


def finetune(
    model: Model,
    train_patches,
    val_patches,
    fp: FocalParams,
    cfg: TrainConfig,
) -> TrainResult:
    """Stage 3: focal-loss supervision on balanced batches.

    Tracks validation loss every epoch, stops after `patience` consecutive
    epochs without improvement, and restores the parameters of the best
    validation epoch before returning.
    """
    if cfg.stage != "finetune":
        raise ConfigError(f"expected stage 'finetune', got {cfg.stage!r}")
    train_list = list(train_patches)
    val_list = list(val_patches)
    if not val_list:
        raise ConfigError("finetune requires a non-empty validation set")
    pos, neg = _split_classes(train_list)
    half = cfg.batch_size // 2
    n_batches = math.ceil(max(len(pos), len(neg)) / half)
    total_steps = cfg.epochs * n_batches
    trainable = list(model.params)
    opt = adam_init(model.params, lr0=cfg.lr0, total_steps=total_steps)
    seeds = _epoch_seeds(cfg, cfg.epochs)
    records = []
    best_loss = math.inf
    best_epoch = -1
    best_params: dict[str, np.ndarray] = {}
    bad_streak = 0
    step = 0
    for epoch in range(cfg.epochs):
        epoch_total = 0.0
        batches = 0
        for batch in balanced_iter(train_list, cfg.batch_size, seed=seeds[epoch]):
            lr = cosine_anneal_lr(min(step, total_steps), total_steps, cfg.lr0)
            x, y = stack_patches(batch)
            g = Graph(DTYPE)
            pnodes = register_params(g, model, "classify")
            out = run_forward(g, pnodes, model.config, x, "classify")
            loss = _rows_focal_loss(g, out["logit"], y, fp)
            epoch_total += _step(
                g, loss, model.params, opt, trainable, lr, f"finetune epoch {epoch}"
            )
            step += 1
            batches += 1
        val_loss = _mean_focal_loss(model, val_list, fp)
        record = {
            "epoch": epoch,
            "stage": "finetune",
            "train_loss": epoch_total / batches,
            "val_loss": val_loss,
            "lr": cosine_anneal_lr(min(step - 1, total_steps), total_steps, cfg.lr0),
        }
        records.append(record)
        logger.info(
            "finetune epoch %d: train %.6f, val %.6f", epoch, record["train_loss"], val_loss
        )
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
            bad_streak = 0
        else:
            bad_streak += 1
            if bad_streak >= cfg.patience:
                break
    for name, value in best_params.items():
        model.params[name][...] = value
    model.stage = "finetuned"
    return TrainResult(model=model, records=records, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# training log export


def write_training_log(records, path) -> None:
    """CSV log: epoch, stage, train_loss, val_loss, lr (val blank if absent)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "stage", "train_loss", "val_loss", "lr"])
        for rec in records:
            val = "" if rec.get("val_loss") is None else repr(rec["val_loss"])
            writer.writerow([rec["epoch"], rec["stage"], repr(rec["train_loss"]), val, repr(rec["lr"])])
