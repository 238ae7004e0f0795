"""PNG renderings: joint PCA false color, flow wheels, cluster label grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .featmap import FeatureMap, Mask, ValidationError
from .matching import FlowField
from .pca import fit_pca_exact, project

MID_GRAY = 128
BACKGROUND_TINT = np.array([255, 140, 0], dtype=np.float64)  # orange
TINT_WEIGHT = 0.45


@dataclass(frozen=True)
class RenderSpec:
    kind: str = "pca_rgb"  # pca_rgb | flow | cluster
    out_h: int | None = None
    out_w: int | None = None

    def __post_init__(self):
        if self.kind not in ("pca_rgb", "flow", "cluster"):
            raise ValidationError(f"unknown render kind {self.kind!r}")
        for d in (self.out_h, self.out_w):
            if d is not None and d < 1:
                raise ValidationError("render dims must be >= 1")


def _grid_mask(mask: Mask | None, fmap: FeatureMap) -> np.ndarray:
    if mask is None:
        return np.ones((fmap.height, fmap.width), dtype=bool)
    if mask.bits.shape != (fmap.height, fmap.width):
        raise ValidationError(
            f"mask {mask.bits.shape} does not match grid {(fmap.height, fmap.width)}"
        )
    return mask.bits


def pca_rgb(
    src: FeatureMap,
    tgt: FeatureMap,
    src_mask: Mask | None = None,
    tgt_mask: Mask | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """False-color the pair with a joint 3-component PCA.

    The fit uses in-mask tokens of both maps; each component is min-max
    scaled to [0, 255] jointly over both images so one feature value maps
    to one color in the whole pair. Zero-range components render mid-gray;
    out-of-mask pixels render black.
    """
    if src.channels != tgt.channels:
        raise ValidationError(
            f"channel mismatch: {src.channels} vs {tgt.channels}"
        )
    sbits = _grid_mask(src_mask, src)
    tbits = _grid_mask(tgt_mask, tgt)
    fit_tokens = np.vstack(
        [src.tokens()[sbits.reshape(-1)], tgt.tokens()[tbits.reshape(-1)]]
    )
    if fit_tokens.shape[0] < 3:
        raise ValidationError(
            f"need at least 3 in-mask tokens for a 3-component fit, got {fit_tokens.shape[0]}"
        )
    model = fit_pca_exact(fit_tokens, k=min(3, fit_tokens.shape[1]))
    proj_s = project(model, src).data.astype(np.float64)
    proj_t = project(model, tgt).data.astype(np.float64)
    if model.k < 3:  # pad narrow feature spaces with flat channels
        pad = ((0, 0), (0, 0), (0, 3 - model.k))
        proj_s = np.pad(proj_s, pad)
        proj_t = np.pad(proj_t, pad)

    joint = np.vstack([proj_s[sbits], proj_t[tbits]])
    lo = joint.min(axis=0)
    hi = joint.max(axis=0)
    span = hi - lo

    def to_rgb(proj, bits):
        img = np.zeros(proj.shape[:2] + (3,), dtype=np.uint8)
        for ch in range(3):
            if span[ch] > 0:
                vals = (proj[..., ch] - lo[ch]) / span[ch] * 255.0
            else:
                vals = np.full(proj.shape[:2], float(MID_GRAY))
            img[..., ch] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
        img[~bits] = 0
        return img

    return to_rgb(proj_s, sbits), to_rgb(proj_t, tbits)


def flow_to_hsv(flow: FlowField) -> np.ndarray:
    """Angle -> hue, magnitude -> saturation (normalized by the valid max),
    full value. Float (H, W, 3) in [0, 1]."""
    du = flow.du.astype(np.float64)
    dv = flow.dv.astype(np.float64)
    mag = np.hypot(du, dv)
    vmax = mag[flow.valid.bits].max() if flow.valid.bits.any() else 0.0
    hue = (np.arctan2(dv, du) + np.pi) / (2.0 * np.pi)
    hue = np.mod(hue, 1.0)
    sat = mag / vmax if vmax > 0 else np.zeros_like(mag)
    val = np.ones_like(mag)
    return np.stack([hue, sat, val], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def render_flow(flow: FlowField, bg_mask: Mask | None = None) -> np.ndarray:
    """Color a flow field; invalid cells white, background region tinted."""
    if not flow.valid.bits.any():
        raise ValidationError("flow has no valid cells to render")
    rgb = _hsv_to_rgb(flow_to_hsv(flow))
    rgb[~flow.valid.bits] = 255
    if bg_mask is not None:
        if bg_mask.bits.shape != flow.du.shape:
            raise ValidationError("background mask does not match flow dims")
        region = bg_mask.bits & flow.valid.bits
        blended = (
            rgb[region].astype(np.float64) * (1.0 - TINT_WEIGHT)
            + BACKGROUND_TINT * TINT_WEIGHT
        )
        rgb[region] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return rgb


# fixed, high-contrast palette; repeats past 12 clusters
_PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 190), (0, 128, 128), (230, 190, 255),
    ],
    dtype=np.uint8,
)


def cluster_label_image(labels: np.ndarray, k: int) -> Image.Image:
    """Indexed-palette PNG image of a cluster label grid."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError("labels must lie in [0, k)")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    palette = np.zeros((256, 3), dtype=np.uint8)
    for i in range(k):
        palette[i] = _PALETTE[i % len(_PALETTE)]
    im.putpalette(palette.reshape(-1).tolist())
    return im
