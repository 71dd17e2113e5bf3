"""Sliding-window patch extraction, balanced batching, mask reconstruction.

Windows are enumerated on a per-class stride grid. A window becomes a
positive patch when at least a fraction tau of its pixels carry the split's
positive region label: tumor tissue (label 2) for training, margin band
(label 3) for validation and test, where only annotated-positive specimens
participate. A window becomes a negative patch when at least tau of its
pixels are plain tissue (label 1) and it does not itself satisfy the
positive criterion. Everything else is skipped.

The inverse mapping accumulates per-pixel votes from patch footprints and
thresholds the mean, producing the coarse mask that seeds refinement.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import (
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
    DataError,
    ExtractionError,
    ShapeError,
)

SPLITS = ("train", "val", "test")

# which mask label counts as "positive" for each split
POSITIVE_LABEL = {"train": 2, "val": 3, "test": 3}
NEGATIVE_LABEL = 1

REGION_NAMES = {1: "negative", 2: "tumor", 3: "margin"}
_REGION_CODES = {name: code for code, name in REGION_NAMES.items()}

_CACHE_MAGIC = b"FFPC"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 64
    stride_positive: int = 3
    stride_negative: dict[str, int] = field(
        default_factory=lambda: {"train": 45, "val": 35, "test": 60}
    )
    label_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ContractError(f"patch_size must be positive, got {self.patch_size}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ContractError(f"label_fraction must lie in (0,1], got {self.label_fraction}")
        strides = [self.stride_positive] + [self.stride_negative[s] for s in SPLITS]
        for s in strides:
            if not 1 <= s <= self.patch_size * 4:
                raise ContractError(f"stride {s} outside [1, {self.patch_size * 4}]")


@dataclass(frozen=True)
class PatchRecord:
    pixels: np.ndarray  # float32 [1, patch_size, patch_size], values in [0,1]
    origin: tuple[int, int]  # (row, col) in the source image
    label: int  # 0 or 1
    source_region: str  # negative | tumor | margin


def _normalized_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ShapeError(f"image must be 2-D grayscale, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ContractError("float image values must lie in [0,1]")
    return arr


def _label_fractions(mask: np.ndarray, label: int, patch: int, stride: int) -> np.ndarray:
    hits = (mask == label).astype(np.float32)
    windows = sliding_window_view(hits, (patch, patch))[::stride, ::stride]
    return windows.mean(axis=(2, 3))


def extract_patches(image, mask, spec: PatchSpec, split: str, class_policy: str = "both") -> list[PatchRecord]:
    """Enumerate labeled windows for one image.

    Positive and negative classes use independent stride grids; the
    negative grid never emits a window that already qualifies as positive.
    Patch pixel blocks are exact crops of the (normalized) source image.
    """
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}")
    if class_policy not in ("positive", "negative", "both"):
        raise ContractError(f"unknown class_policy {class_policy!r}")
    img = _normalized_image(image)
    lab = np.asarray(mask)
    if lab.shape != img.shape:
        raise ShapeError(f"mask dims {lab.shape} do not match image dims {img.shape}")
    if not np.isin(lab, (0, 1, 2, 3)).all():
        raise DataError("mask labels must lie in {0,1,2,3}")
    p = spec.patch_size
    if img.shape[0] < p or img.shape[1] < p:
        raise ExtractionError(f"image {img.shape} smaller than patch size {p}")

    pos_label = POSITIVE_LABEL[split]
    tau = spec.label_fraction
    records: list[PatchRecord] = []

    def crop(r: int, c: int) -> np.ndarray:
        return img[r : r + p, c : c + p].copy()[None, :, :]

    if class_policy in ("positive", "both"):
        s = spec.stride_positive
        frac = _label_fractions(lab, pos_label, p, s)
        for i, j in np.argwhere(frac >= tau):
            r, c = int(i) * s, int(j) * s
            records.append(
                PatchRecord(
                    pixels=crop(r, c),
                    origin=(r, c),
                    label=1,
                    source_region=REGION_NAMES[pos_label],
                )
            )
    if class_policy in ("negative", "both"):
        s = spec.stride_negative[split]
        neg_frac = _label_fractions(lab, NEGATIVE_LABEL, p, s)
        pos_frac = _label_fractions(lab, pos_label, p, s)
        keep = (neg_frac >= tau) & (pos_frac < tau)
        for i, j in np.argwhere(keep):
            r, c = int(i) * s, int(j) * s
            records.append(
                PatchRecord(pixels=crop(r, c), origin=(r, c), label=0, source_region="negative")
            )
    return records


def balanced_iter(patches, batch_size: int, seed: int):
    """Yield batches holding exactly batch_size/2 patches of each class.

    The larger class is consumed as a shuffled permutation (wrapping if the
    batch count overruns it); the smaller class is resampled with
    replacement. One pass covers the larger class once, so the number of
    batches is ceil(2*max(n_pos, n_neg) / batch_size).
    """
    if batch_size < 2 or batch_size % 2 != 0:
        raise ContractError(f"batch_size must be even and >= 2, got {batch_size}")
    pos = [rec for rec in patches if rec.label == 1]
    neg = [rec for rec in patches if rec.label == 0]
    if not pos or not neg:
        raise DataError(f"both classes required: {len(pos)} positive, {len(neg)} negative")
    half = batch_size // 2
    n_batches = math.ceil(max(len(pos), len(neg)) / half)
    rng = np.random.default_rng(seed)

    def plan(items: list) -> list[np.ndarray]:
        n = len(items)
        if n >= max(len(pos), len(neg)):
            perm = rng.permutation(n)
            return [perm[np.arange(b * half, (b + 1) * half) % n] for b in range(n_batches)]
        return [rng.integers(0, n, size=half) for _ in range(n_batches)]

    pos_plan = plan(pos)
    neg_plan = plan(neg)
    for b in range(n_batches):
        batch = [pos[i] for i in pos_plan[b]] + [neg[i] for i in neg_plan[b]]
        order = rng.permutation(batch_size)
        yield [batch[i] for i in order]


def stack_patches(records) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into ([B,1,p,p] float32 pixels, [B] float32 labels)."""
    recs = list(records)
    if not recs:
        raise ContractError("no patches to stack")
    x = np.stack([r.pixels for r in recs]).astype(np.float32)
    y = np.array([r.label for r in recs], dtype=np.float32)
    return x, y


def reconstruct_coarse_mask(
    predictions,
    dims: tuple[int, int],
    aggregation: str = "mean",
    vote_threshold: float = 0.5,
    patch_size: int = 64,
) -> np.ndarray:
    """Map patch-level labels back to a binary pixel mask.

    ``mean`` marks a pixel when the average label of all covering patches
    reaches vote_threshold; ``any-positive`` marks it when any covering
    patch is positive. Pixels no patch covers stay 0.
    """
    if aggregation not in ("mean", "any-positive"):
        raise ContractError(f"unknown aggregation {aggregation!r}")
    h, w = dims
    cover = np.zeros((h, w), dtype=np.int64)
    votes = np.zeros((h, w), dtype=np.int64)
    for origin, label in predictions:
        r, c = int(origin[0]), int(origin[1])
        if r < 0 or c < 0 or r + patch_size > h or c + patch_size > w:
            raise ContractError(f"patch at {origin} falls outside {dims}")
        if label not in (0, 1):
            raise ContractError(f"patch label must be 0 or 1, got {label!r}")
        cover[r : r + patch_size, c : c + patch_size] += 1
        if label:
            votes[r : r + patch_size, c : c + patch_size] += 1
    out = np.zeros((h, w), dtype=np.uint8)
    covered = cover > 0
    if aggregation == "mean":
        out[covered] = (votes[covered] / cover[covered] >= vote_threshold).astype(np.uint8)
    else:
        out[covered] = (votes[covered] > 0).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# dataset ingestion


def load_manifest(path) -> list[dict]:
    """Read a dataset manifest; paths come back absolute."""
    manifest_path = Path(path)
    try:
        entries = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise DataError("manifest must be a JSON list")
    root = manifest_path.parent
    out = []
    for i, entry in enumerate(entries):
        missing = {"image_path", "mask_path", "split", "patient_id"} - set(entry)
        if missing:
            raise DataError(f"manifest entry {i} missing keys: {sorted(missing)}")
        if entry["split"] not in SPLITS:
            raise DataError(f"manifest entry {i} has unknown split {entry['split']!r}")
        resolved = dict(entry)
        resolved["image_path"] = str(root / entry["image_path"])
        resolved["mask_path"] = str(root / entry["mask_path"])
        out.append(resolved)
    return out


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"))


def load_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DataError(f"mask {path} is not single-channel")
    if not np.isin(arr, (0, 1, 2, 3)).all():
        raise DataError(f"mask {path} has labels outside {{0..3}}")
    return arr.astype(np.uint8)


# ---------------------------------------------------------------------------
# patch cache


def save_patch_cache(path, records, meta: dict | None = None) -> None:
    """Serialize extracted patches to a compact binary with magic + version."""
    recs = list(records)
    header = {
        "count": len(recs),
        "patch_size": int(recs[0].pixels.shape[-1]) if recs else 0,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", _CACHE_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for rec in recs:
            fh.write(
                struct.pack(
                    "<BBII",
                    rec.label,
                    _REGION_CODES[rec.source_region],
                    rec.origin[0],
                    rec.origin[1],
                )
            )
            fh.write(np.ascontiguousarray(rec.pixels, dtype="<f4").tobytes())


def load_patch_cache(path) -> tuple[list[PatchRecord], dict]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if len(view) < 12:
        raise CheckpointTruncatedError(f"{path} shorter than its fixed header")
    if bytes(view[:4]) != _CACHE_MAGIC:
        raise CheckpointMagicError(f"{path} does not start with {_CACHE_MAGIC!r}")
    version, header_len = struct.unpack("<II", view[4:12])
    if version != _CACHE_VERSION:
        raise CheckpointVersionError(f"cache version {version}, expected {_CACHE_VERSION}")
    offset = 12
    if len(view) < offset + header_len:
        raise CheckpointTruncatedError(f"{path} header truncated")
    header = json.loads(bytes(view[offset : offset + header_len]))
    offset += header_len
    p = header["patch_size"]
    pixel_bytes = p * p * 4
    records = []
    for _ in range(header["count"]):
        if len(view) < offset + 10 + pixel_bytes:
            raise CheckpointTruncatedError(f"{path} record truncated")
        label, region_code, row, col = struct.unpack("<BBII", view[offset : offset + 10])
        offset += 10
        pixels = np.frombuffer(view[offset : offset + pixel_bytes], dtype="<f4").reshape(1, p, p)
        offset += pixel_bytes
        records.append(
            PatchRecord(
                pixels=pixels.copy(),
                origin=(row, col),
                label=int(label),
                source_region=REGION_NAMES[region_code],
            )
        )
    return records, header["meta"]
