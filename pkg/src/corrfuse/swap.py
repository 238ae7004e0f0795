"""Pixel-level instance swapping driven by dense feature correspondence.

The procedure: upsample both feature grids to their image resolutions,
then for every source pixel inside the source instance mask, find its
nearest-neighbor pixel among the target instance pixels and copy that
target pixel's color. Pixels outside the source mask are passed through
untouched, so the output differs from the source image only inside the
instance.

Tokens duplicated by edge clamping during upsampling share a nearest
neighbor under the smallest-row-major-index tie rule; with distinct
in-mask tokens (the generic case away from the clamped border band),
swapping an image pair onto itself reproduces the source image exactly.
"""

from __future__ import annotations

import logging

import numpy as np

from .featmap import FeatureMap, Mask, ValidationError, bilinear_resize
from .images import validate_rgb
from .matching import _nn_tokens, normalize_tokens

logger = logging.getLogger(__name__)


def swap_instance(
    src_img: np.ndarray,
    tgt_img: np.ndarray,
    src_feat: FeatureMap,
    tgt_feat: FeatureMap,
    src_mask: Mask,
    tgt_mask: Mask,
) -> np.ndarray:
    """Pull target-instance pixels onto the source instance.

    Masks are at image resolution. Returns a new image with the source
    image's dims. An empty source mask is a no-op (with a warning); an
    empty target mask is an error since there is nothing to sample.
    """
    src_img = validate_rgb(src_img)
    tgt_img = validate_rgb(tgt_img)
    if src_feat.channels != tgt_feat.channels:
        raise ValidationError(
            f"feature channels differ: {src_feat.channels} vs {tgt_feat.channels}"
        )
    src_h, src_w = src_img.shape[:2]
    tgt_h, tgt_w = tgt_img.shape[:2]
    if src_mask.bits.shape != (src_h, src_w):
        raise ValidationError(
            f"source mask {src_mask.bits.shape} does not match image {(src_h, src_w)}"
        )
    if tgt_mask.bits.shape != (tgt_h, tgt_w):
        raise ValidationError(
            f"target mask {tgt_mask.bits.shape} does not match image {(tgt_h, tgt_w)}"
        )
    if src_mask.count() == 0:
        logger.warning("source mask is empty; returning the source image unchanged")
        return src_img.copy()
    if tgt_mask.count() == 0:
        raise ValidationError("target mask is empty: nothing to sample from")

    src_up = bilinear_resize(src_feat, src_h, src_w)
    tgt_up = bilinear_resize(tgt_feat, tgt_h, tgt_w)

    src_flat = src_mask.bits.reshape(-1)
    tgt_flat = tgt_mask.bits.reshape(-1)
    tgt_positions = np.flatnonzero(tgt_flat)  # ascending: keeps the shared tie rule
    query = src_up.tokens()[src_flat]
    pool = normalize_tokens(tgt_up.tokens()[tgt_positions])
    idx, _ = _nn_tokens(query, pool, None)

    out = src_img.copy()
    matched = tgt_positions[idx]
    out.reshape(-1, 3)[src_flat] = tgt_img.reshape(-1, 3)[matched]
    return out
