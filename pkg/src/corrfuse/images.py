"""PNG image and mask I/O (Pillow-backed, deterministic encoder settings)."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .featmap import Mask, ValidationError


def load_image_rgb(path) -> np.ndarray:
    """Load a PNG/JPEG as (H, W, 3) uint8 RGB."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image_png(arr: np.ndarray, path) -> None:
    arr = validate_rgb(arr)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", compress_level=6)


def load_mask_png(path) -> Mask:
    """Single-channel mask image; any nonzero pixel counts as inside."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return Mask(bits=arr != 0)


def save_mask_png(mask: Mask, path) -> None:
    arr = np.where(mask.bits, np.uint8(255), np.uint8(0))
    Image.fromarray(arr, mode="L").save(path, format="PNG", compress_level=6)


def validate_rgb(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValidationError(
            f"expected (H, W, 3) uint8 RGB image, got shape {arr.shape} dtype {arr.dtype}"
        )
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError("image dims must be >= 1")
    return arr
