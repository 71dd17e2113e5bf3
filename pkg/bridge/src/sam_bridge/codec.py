"""Base64 PNG payload coding for the wire protocol.

Images travel as 8-bit grayscale PNG, masks as 1-bit PNG, both base64
encoded. Every decoding failure raises a 400-class error; the protocol
treats undecodable payloads as malformed requests, never as empty prompts.
"""

from __future__ import annotations

import base64
import binascii
import io

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import bad_request


def _decode_png(payload, what: str) -> Image.Image:
    if not isinstance(payload, str) or not payload:
        raise bad_request(f"{what} must be a non-empty base64 string")
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise bad_request(f"{what} is not valid base64: {exc}") from exc
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise bad_request(f"{what} is not a decodable PNG: {exc}") from exc
    return img


def decode_image(payload) -> np.ndarray:
    """Base64 8-bit grayscale PNG -> uint8 [H, W]."""
    img = _decode_png(payload, "image")
    if img.mode != "L":
        raise bad_request(f"image must be 8-bit grayscale PNG, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.uint8)


def decode_mask(payload) -> np.ndarray:
    """Base64 1-bit PNG -> uint8 [H, W] of {0, 1}."""
    img = _decode_png(payload, "mask")
    if img.mode != "1":
        raise bad_request(f"mask must be 1-bit PNG, got mode {img.mode!r}")
    return (np.asarray(img) > 0).astype(np.uint8)


def encode_mask(mask: np.ndarray) -> str:
    """uint8 {0, 1} [H, W] -> base64 1-bit PNG."""
    img = Image.fromarray(mask.astype(np.uint8) * np.uint8(255), "L").convert("1")
    buf = io.BytesIO()
    img.save(buf, "PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")
