"""Coarse-mask refinement: box/mask prompt math, a deterministic morphological
refiner, and an HTTP client for an external refinement service.

Both refinement stages run the same orchestration: stage 1 prompts with the
bounding box of the coarse mask, stage 2 prompts with the coarse mask itself.
The built-in backend is classical morphology; it makes no claim of equivalence
to a learned segmenter but exercises the identical prompt path.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import (
    BackendTimeoutError,
    BackendUnavailableError,
    ConfigError,
    ContractError,
    EmptyMaskError,
    RemoteProtocolError,
    ShapeError,
)

logger = logging.getLogger(__name__)

BACKENDS = ("morphological", "remote")


@dataclass(frozen=True)
class BBoxPrompt:
    """Padded bounding box of a mask's positive pixels, in (x=col, y=row) order."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    delta_w: int = 0
    delta_h: int = 0

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max", "delta_w", "delta_h"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ContractError(f"{name} must be a non-negative integer, got {v!r}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ContractError(
                f"degenerate box ({self.x_min},{self.y_min})..({self.x_max},{self.y_max})"
            )

    def as_xyxy(self) -> tuple[int, int, int, int]:
        return (int(self.x_min), int(self.y_min), int(self.x_max), int(self.y_max))


@dataclass(frozen=True)
class RefinementConfig:
    backend: str = "morphological"
    delta_w: int = 10
    delta_h: int = 10
    radius: int = 5
    min_area: int = 25
    endpoint: str = "http://127.0.0.1:8765"
    timeout_ms: int = 5000
    max_inflight: int = 4

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.delta_w < 0 or self.delta_h < 0:
            raise ConfigError("box paddings must be >= 0")
        if self.radius < 1:
            raise ConfigError(f"radius must be >= 1, got {self.radius}")
        if self.min_area < 0:
            raise ConfigError(f"min_area must be >= 0, got {self.min_area}")
        if self.timeout_ms <= 0:
            raise ConfigError(f"timeout_ms must be positive, got {self.timeout_ms}")
        if self.max_inflight < 1:
            raise ConfigError(f"max_inflight must be >= 1, got {self.max_inflight}")


@dataclass(frozen=True)
class RefineResult:
    m1: np.ndarray
    m2: np.ndarray
    backend: str
    latency_ms: tuple[float, float] = field(default=(0.0, 0.0))


def _check_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    vals = np.unique(arr)
    if not np.isin(vals, [0, 1]).all():
        raise ContractError(f"mask values must be 0/1, found {vals[:8]}")
    return arr.astype(np.uint8)


def _check_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ShapeError(f"image must be 2-D grayscale, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ContractError(f"image must be uint8, got dtype {arr.dtype}")
    return arr


def compute_bbox(mc, delta_w: int = 10, delta_h: int = 10) -> BBoxPrompt:
    """Padded min/max box around the positive pixels, clamped to image bounds."""
    mask = _check_mask(mc)
    if delta_w < 0 or delta_h < 0:
        raise ContractError("box paddings must be >= 0")
    if not mask.any():
        raise EmptyMaskError("cannot prompt from an empty mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return BBoxPrompt(
        x_min=int(max(cols[0] - delta_w, 0)),
        y_min=int(max(rows[0] - delta_h, 0)),
        x_max=int(min(cols[-1] + delta_w, w - 1)),
        y_max=int(min(rows[-1] + delta_h, h - 1)),
        delta_w=int(delta_w),
        delta_h=int(delta_h),
    )


# ---------------------------------------------------------------------------
# morphological backend
#
# Disk dilation/erosion via the distance transform: dilation marks pixels
# within r of the mask, erosion keeps pixels farther than r from background.
# Out-of-image pixels count as background for dilation and as foreground for
# erosion, so the all-ones mask is a fixed point.


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if not mask.any():  # EDT is undefined without background pixels
        return np.zeros_like(mask, dtype=bool)
    return ndimage.distance_transform_edt(~mask) <= radius


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if mask.all():  # EDT is undefined without background pixels
        return np.ones_like(mask, dtype=bool)
    return ndimage.distance_transform_edt(mask) > radius


def morph_refine(mask, bbox: BBoxPrompt, radius: int = 5, min_area: int = 25) -> np.ndarray:
    """Closing-then-opening with a disk of the given radius, then drop
    components smaller than min_area or entirely outside the box."""
    m = _check_mask(mask).astype(bool)
    if radius < 1:
        raise ContractError(f"radius must be >= 1, got {radius}")
    if not m.any():
        return np.zeros(m.shape, dtype=np.uint8)
    closed = _erode(_dilate(m, radius), radius)
    opened = _dilate(_erode(closed, radius), radius)
    labels, n = ndimage.label(opened)
    if n == 0:
        return np.zeros(m.shape, dtype=np.uint8)
    areas = np.bincount(labels.ravel())
    window = labels[bbox.y_min : bbox.y_max + 1, bbox.x_min : bbox.x_max + 1]
    in_box = np.zeros(n + 1, dtype=bool)
    in_box[np.unique(window)] = True
    keep = (areas >= min_area) & in_box
    keep[0] = False
    return keep[labels].astype(np.uint8)


# ---------------------------------------------------------------------------
# wire encoding (base64 PNG, 8-bit grayscale images, 1-bit masks)


def encode_image_png(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(_check_image(image), "L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def encode_mask_png(mask: np.ndarray) -> str:
    m = _check_mask(mask)
    buf = io.BytesIO()
    Image.fromarray(m * np.uint8(255), "L").convert("1").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask_png(payload: str) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
        img = Image.open(io.BytesIO(raw))
        return (np.array(img.convert("1"), dtype=np.uint8) > 0).astype(np.uint8)
    except (ValueError, OSError, UnidentifiedImageError) as exc:
        raise RemoteProtocolError(f"response mask is not a decodable PNG: {exc}") from exc


# ---------------------------------------------------------------------------
# remote backend


class RemoteClient:
    """HTTP client for the refinement service.

    The first request is gated on GET /v1/health; a bounded semaphore caps
    in-flight requests. Failed requests are never retried here: a timed-out
    refine may have consumed remote state, so retry policy belongs to callers.
    """

    def __init__(self, endpoint: str, timeout_ms: int = 5000, max_inflight: int = 4):
        if max_inflight < 1:
            raise ConfigError(f"max_inflight must be >= 1, got {max_inflight}")
        if timeout_ms <= 0:
            raise ConfigError(f"timeout_ms must be positive, got {timeout_ms}")
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_ms / 1000.0
        self.backend_name: str | None = None
        self._gate = threading.BoundedSemaphore(max_inflight)
        self._healthy = False
        self._health_lock = threading.Lock()

    def ensure_healthy(self) -> None:
        with self._health_lock:
            if self._healthy:
                return
            try:
                with urllib.request.urlopen(
                    self.endpoint + "/v1/health", timeout=self.timeout_s
                ) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
            except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
                raise BackendUnavailableError(
                    f"health check against {self.endpoint} failed: {exc}"
                ) from exc
            if body.get("status") != "ok":
                raise BackendUnavailableError(f"service not healthy: {body!r}")
            self.backend_name = str(body.get("backend", "unknown"))
            self._healthy = True

    def _post_refine(self, payload: dict) -> dict:
        req = urllib.request.Request(
            self.endpoint + "/v1/refine",
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with self._gate:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                if exc.code == 504:
                    raise BackendTimeoutError("remote model timed out (504)") from exc
                detail = exc.read().decode("utf-8", "replace")[:200]
                raise RemoteProtocolError(f"HTTP {exc.code}: {detail}") from exc
            except TimeoutError as exc:
                raise BackendTimeoutError(
                    f"no response within {self.timeout_s * 1000:.0f} ms"
                ) from exc
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, TimeoutError):
                    raise BackendTimeoutError(
                        f"no response within {self.timeout_s * 1000:.0f} ms"
                    ) from exc
                raise BackendUnavailableError(f"request failed: {exc.reason}") from exc
            except json.JSONDecodeError as exc:
                raise RemoteProtocolError(f"response is not JSON: {exc}") from exc

    def _refine(self, image: np.ndarray, payload: dict) -> tuple[np.ndarray, float]:
        self.ensure_healthy()
        body = self._post_refine(payload)
        if "mask" not in body or "score" not in body:
            raise RemoteProtocolError(f"response missing mask/score: {sorted(body)}")
        mask = decode_mask_png(body["mask"])
        if mask.shape != image.shape:
            raise RemoteProtocolError(
                f"response mask shape {mask.shape} does not match image {image.shape}"
            )
        return mask, float(body["score"])

    def refine_box(self, image, box: BBoxPrompt, session: str) -> tuple[np.ndarray, float]:
        img = _check_image(image)
        payload = {
            "image": encode_image_png(img),
            "prompt_type": "box",
            "box": list(box.as_xyxy()),
            "session": session,
        }
        return self._refine(img, payload)

    def refine_mask(self, image, mask, session: str) -> tuple[np.ndarray, float]:
        img = _check_image(image)
        payload = {
            "image": encode_image_png(img),
            "prompt_type": "mask",
            "mask": encode_mask_png(mask),
            "session": session,
        }
        return self._refine(img, payload)


# ---------------------------------------------------------------------------
# orchestration


def refine(image, mc, cfg: RefinementConfig, client: RemoteClient | None = None) -> RefineResult:
    """Two-stage refinement: box prompt -> m1, then coarse-mask prompt -> m2.

    m2 is the pipeline's final mask. Inputs are never mutated. With the
    morphological backend both stages reduce to the same deterministic
    filtering, so m1 == m2 there.
    """
    img = _check_image(image)
    mask = _check_mask(mc)
    if img.shape != mask.shape:
        raise ShapeError(f"image {img.shape} and mask {mask.shape} dims differ")
    bbox = compute_bbox(mask, cfg.delta_w, cfg.delta_h)

    if cfg.backend == "morphological":
        # Stage 2's prompt p2 is mc itself, so for this pure backend the
        # stage-2 call is identical to stage 1; reuse its result.
        t0 = time.perf_counter()
        m1 = morph_refine(mask, bbox, cfg.radius, cfg.min_area)
        t1 = time.perf_counter()
        m2 = m1.copy()
        t2 = time.perf_counter()
    else:
        if client is None:
            client = RemoteClient(cfg.endpoint, cfg.timeout_ms, cfg.max_inflight)
        session = "refine-" + hashlib.sha256(img.tobytes()).hexdigest()[:16]
        t0 = time.perf_counter()
        try:
            m1, score1 = client.refine_box(img, bbox, session)
        except BackendTimeoutError as exc:
            raise BackendTimeoutError(f"box-prompt stage: {exc}") from exc
        except RemoteProtocolError as exc:
            raise RemoteProtocolError(f"box-prompt stage: {exc}") from exc
        t1 = time.perf_counter()
        try:
            m2, score2 = client.refine_mask(img, mask, session)
        except BackendTimeoutError as exc:
            raise BackendTimeoutError(f"mask-prompt stage: {exc}") from exc
        except RemoteProtocolError as exc:
            raise RemoteProtocolError(f"mask-prompt stage: {exc}") from exc
        t2 = time.perf_counter()
        logger.debug("remote scores: box=%.4f mask=%.4f", score1, score2)

    lat = ((t1 - t0) * 1000.0, (t2 - t1) * 1000.0)
    logger.debug("refine backend=%s latency_ms=(%.2f, %.2f)", cfg.backend, *lat)
    return RefineResult(m1=m1, m2=m2, backend=cfg.backend, latency_ms=lat)
