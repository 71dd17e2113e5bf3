"""Seeded synthetic specimen-radiograph generator with 4-label ground truth.

Each sample is an elliptical "specimen" of noisy tissue (label 1) on a black
background (label 0) containing one brighter elliptical tumor blob (label 2).
When a positive margin is requested, the tumor is placed so it reaches the
boundary band of the specimen, and the overlap of tumor and band is relabeled
3. Samples are pure functions of (seed, index), so datasets regenerate
byte-identically. Validation and test splits are always margin-positive.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, GenerationError

TISSUE_BASE_INTENSITY = 0.45

# indexed-PNG palette for the 4 labels; grays/red/green chosen for inspection
_MASK_PALETTE = [0, 0, 0, 120, 120, 120, 200, 60, 60, 60, 200, 60] + [0] * (256 - 4) * 3

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 512
    specimen_axis_range: tuple[float, float] = (0.26, 0.42)
    tumor_radius_range: tuple[float, float] = (0.06, 0.14)
    band_width: int = 12
    contrast: float = 0.25
    noise_std: float = 0.05
    margin_present_prob: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size < 64:
            raise ConfigError(f"image_size must be at least 64, got {self.image_size}")
        if self.band_width < 1:
            raise ConfigError(f"band_width must be at least 1, got {self.band_width}")
        if not 0.0 <= self.contrast <= 1.0:
            raise ConfigError(f"contrast must lie in [0,1], got {self.contrast}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be non-negative, got {self.noise_std}")
        if not 0.0 <= self.margin_present_prob <= 1.0:
            raise ConfigError(f"margin_present_prob must lie in [0,1], got {self.margin_present_prob}")
        for name in ("specimen_axis_range", "tumor_radius_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")


@dataclass(frozen=True)
class PhantomSample:
    image: np.ndarray  # uint8 [H,W]
    mask: np.ndarray  # uint8 [H,W], labels 0..3
    margin_present: bool
    seed: tuple[int, int]  # (config seed, sample index)


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def generate_sample(cfg: PhantomConfig, index: int) -> PhantomSample:
    """Build one sample, deterministic in (cfg.seed, index).

    Geometry is rejection-sampled: a draw is retried until the tumor sits
    fully in (margin absent) or reaches (margin present) the boundary band,
    with a hard cap of 100 attempts before giving up.
    """
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    margin_present = bool(rng.random() < cfg.margin_present_prob)

    lo, hi = cfg.specimen_axis_range
    for _ in range(100):
        cy = size / 2 + rng.uniform(-0.04, 0.04) * size
        cx = size / 2 + rng.uniform(-0.04, 0.04) * size
        ry = rng.uniform(lo, hi) * size
        rx = rng.uniform(lo, hi) * size
        spin = rng.uniform(0, math.pi)
        specimen = _ellipse(size, cy, cx, ry, rx, spin)
        depth = ndimage.distance_transform_edt(specimen)
        band = specimen & (depth <= cfg.band_width)
        interior = depth > cfg.band_width
        if interior.sum() < 200:
            continue

        tumor = _place_tumor(cfg, rng, size, cy, cx, ry, rx, spin, specimen, band, interior, margin_present)
        if tumor is None:
            continue

        mask = np.zeros((size, size), dtype=np.uint8)
        mask[specimen] = 1
        mask[tumor] = 2
        if margin_present:
            mask[tumor & band] = 3

        image = np.zeros((size, size), dtype=np.float64)
        tissue = TISSUE_BASE_INTENSITY + rng.normal(0.0, cfg.noise_std, (size, size))
        image[specimen] = tissue[specimen]
        image[tumor] += cfg.contrast
        image = np.clip(image, 0.0, 1.0)
        return PhantomSample(
            image=np.round(image * 255).astype(np.uint8),
            mask=mask,
            margin_present=margin_present,
            seed=(cfg.seed, index),
        )
    raise GenerationError(f"no feasible geometry for sample {index} after 100 attempts")


def _place_tumor(cfg, rng, size, cy, cx, ry, rx, spin, specimen, band, interior, margin_present):
    """One tumor placement attempt; None means re-roll the whole geometry."""
    t_lo, t_hi = cfg.tumor_radius_range
    tr1 = rng.uniform(t_lo, t_hi) * size
    tr2 = rng.uniform(t_lo, t_hi) * size
    t_spin = rng.uniform(0, math.pi)
    if margin_present:
        # walk in from the boundary point at a random bearing so the blob
        # straddles the band instead of hoping uniform placement lands there
        phi = rng.uniform(0, 2 * math.pi)
        bry = ry * math.sin(phi)
        brx = rx * math.cos(phi)
        ct, st = math.cos(spin), math.sin(spin)
        by = cy + brx * st + bry * ct
        bx = cx + brx * ct - bry * st
        pull = rng.uniform(0.3, 0.8) * min(tr1, tr2)
        ty = by + (cy - by) / max(1e-9, math.hypot(cy - by, cx - bx)) * pull
        tx = bx + (cx - bx) / max(1e-9, math.hypot(cy - by, cx - bx)) * pull
    else:
        choices = np.argwhere(interior)
        ty, tx = choices[rng.integers(len(choices))]
        ty = float(ty) + rng.uniform(-0.5, 0.5)
        tx = float(tx) + rng.uniform(-0.5, 0.5)
    blob = _ellipse(size, ty, tx, tr1, tr2, t_spin) & specimen
    if blob.sum() < max(16, 0.25 * math.pi * tr1 * tr2):
        return None
    touches_band = bool((blob & band).any())
    if margin_present != touches_band:
        return None
    if margin_present and (blob & band).sum() < 16:
        return None
    return blob


def save_sample(sample: PhantomSample, image_path: Path, mask_path: Path) -> None:
    """Write the image as 8-bit grayscale PNG and the labels as indexed PNG."""
    image_path.parent.mkdir(parents=True, exist_ok=True)
    mask_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.image, mode="L").save(image_path)
    mask_img = Image.fromarray(sample.mask, mode="P")
    mask_img.putpalette(_MASK_PALETTE)
    mask_img.save(mask_path)


def generate_dataset(cfg: PhantomConfig, counts: dict[str, int], out_dir) -> Path:
    """Write images, masks, and a JSON manifest; returns the manifest path.

    Sample indices run consecutively across splits in train, val, test
    order, so the same (cfg, counts) always regenerates identical bytes.
    Val and test samples are forced margin-positive regardless of
    ``cfg.margin_present_prob``.
    """
    for split, n in counts.items():
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        if n < 1:
            raise ConfigError(f"count for split {split!r} must be at least 1, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    index = 0
    for split in SPLITS:
        n = counts.get(split, 0)
        split_cfg = cfg if split == "train" else dataclasses.replace(cfg, margin_present_prob=1.0)
        for _ in range(n):
            sample = generate_sample(split_cfg, index)
            image_rel = f"images/phantom_{index:05d}.png"
            mask_rel = f"masks/phantom_{index:05d}.png"
            save_sample(sample, out / image_rel, out / mask_rel)
            entries.append(
                {
                    "image_path": image_rel,
                    "mask_path": mask_rel,
                    "split": split,
                    "patient_id": f"P{index:05d}",
                }
            )
            index += 1
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
