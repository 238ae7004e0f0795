"""Dense and sparse correspondence by exhaustive nearest-neighbor search.

Similarity is cosine on raw tokens: the fusion stage encodes its block
weighting in token norms, and cosine is invariant to that global scaling,
so matches on a fused map with weight 1 (or 0) coincide index-for-index
with matches on the diffusion (or ViT) map alone. Ties are broken toward
the smallest row-major target index, which makes results independent of
any internal blocking or parallel schedule.

Grid cells and image pixels are tied together by pixel-center scaling:

    cell  = round((px + 0.5) * n_grid / n_img - 0.5)   (clamped)
    px    = (cell + 0.5) * n_img / n_grid - 0.5

the exact inverse pair used by the resampling code in `featmap`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .featmap import (
    FeatureMap,
    Mask,
    ValidationError,
    bilinear_resize_array,
    normalize_tokens,
    resize_mask,
)

SFLW_MAGIC = b"SFLW"
SFLW_VERSION = 1

_SFLW_HEADER = struct.Struct("<4sIII")

# source-token block height for the blocked similarity search
_NN_BLOCK_ELEMS = 1 << 24


@dataclass(frozen=True)
class Correspondence:
    """One matched keypoint: source and target pixel coords plus the
    similarity of the matched tokens. ``error`` is set (and the entry is
    not a usable match) when the query keypoint was rejected."""

    src_xy: tuple[float, float]
    tgt_xy: tuple[float, float]
    score: float
    error: str | None = None


@dataclass(frozen=True)
class MatchSet:
    pair_id: str
    entries: tuple[Correspondence, ...]
    feature_tag: str = ""

    def to_json_obj(self) -> dict:
        entries = []
        for e in self.entries:
            obj = {
                "src": [float(e.src_xy[0]), float(e.src_xy[1])],
                "tgt": [float(e.tgt_xy[0]), float(e.tgt_xy[1])],
                "score": float(e.score),
            }
            if e.error is not None:
                obj["error"] = e.error
            entries.append(obj)
        return {"pair_id": self.pair_id, "feature_tag": self.feature_tag, "entries": entries}

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_obj(cls, obj: dict) -> "MatchSet":
        entries = tuple(
            Correspondence(
                src_xy=(float(e["src"][0]), float(e["src"][1])),
                tgt_xy=(float(e["tgt"][0]), float(e["tgt"][1])),
                score=float(e["score"]),
                error=e.get("error"),
            )
            for e in obj["entries"]
        )
        return cls(
            pair_id=str(obj["pair_id"]),
            entries=entries,
            feature_tag=str(obj.get("feature_tag", "")),
        )

    @classmethod
    def from_json(cls, text: str) -> "MatchSet":
        return cls.from_json_obj(json.loads(text))


@dataclass(frozen=True)
class FlowField:
    """Per-cell 2D displacement (du, dv) in pixels plus a validity mask."""

    du: np.ndarray
    dv: np.ndarray
    valid: Mask

    def __post_init__(self):
        du = np.ascontiguousarray(np.asarray(self.du, dtype=np.float32))
        dv = np.ascontiguousarray(np.asarray(self.dv, dtype=np.float32))
        if du.shape != dv.shape or du.ndim != 2:
            raise ValidationError(f"du/dv must be equal 2-d shapes, got {du.shape}/{dv.shape}")
        if self.valid.bits.shape != du.shape:
            raise ValidationError("valid mask does not match flow dims")
        if not (np.isfinite(du[self.valid.bits]).all() and np.isfinite(dv[self.valid.bits]).all()):
            raise ValidationError("flow has non-finite values inside the valid mask")
        du.setflags(write=False)
        dv.setflags(write=False)
        object.__setattr__(self, "du", du)
        object.__setattr__(self, "dv", dv)

    @property
    def height(self) -> int:
        return self.du.shape[0]

    @property
    def width(self) -> int:
        return self.du.shape[1]


def pixel_to_cell(px: np.ndarray, n_img: int, n_grid: int) -> np.ndarray:
    """Image pixel coordinate -> grid cell index (nearest, clamped)."""
    g = (np.asarray(px, dtype=np.float64) + 0.5) * (n_grid / n_img) - 0.5
    return np.clip(np.floor(g + 0.5).astype(np.int64), 0, n_grid - 1)


def cell_to_pixel(cell: np.ndarray, n_img: int, n_grid: int) -> np.ndarray:
    """Grid cell index -> the image pixel at the cell center."""
    return (np.asarray(cell, dtype=np.float64) + 0.5) * (n_img / n_grid) - 0.5


def _masked_target_tokens(tgt: FeatureMap, tgt_mask: Mask | None) -> np.ndarray:
    tokens = normalize_tokens(tgt.tokens())
    if tgt_mask is not None:
        if tgt_mask.bits.shape != (tgt.height, tgt.width):
            raise ValidationError(
                f"target mask {tgt_mask.bits.shape} does not match target grid "
                f"{(tgt.height, tgt.width)}"
            )
        if tgt_mask.count() == 0:
            raise ValidationError("target mask excludes every token")
    return tokens


def _nn_tokens(
    src_tokens: np.ndarray,
    tgt_tokens_normed: np.ndarray,
    tgt_keep: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Blocked exhaustive cosine argmax of ``src_tokens`` against the
    (pre-normalized) target tokens. Returns flat indices and scores."""
    src_n = normalize_tokens(src_tokens)
    n_src = src_n.shape[0]
    n_tgt = tgt_tokens_normed.shape[0]
    idx = np.empty(n_src, dtype=np.int64)
    score = np.empty(n_src, dtype=np.float32)
    block = max(1, _NN_BLOCK_ELEMS // max(1, n_tgt))
    for start in range(0, n_src, block):
        stop = min(start + block, n_src)
        sim = src_n[start:stop] @ tgt_tokens_normed.T
        if tgt_keep is not None:
            sim[:, ~tgt_keep] = -np.inf
        best = np.argmax(sim, axis=1)  # first max wins: smallest row-major index
        idx[start:stop] = best
        score[start:stop] = sim[np.arange(stop - start), best]
    return idx, score


def nn_dense(
    src: FeatureMap,
    tgt: FeatureMap,
    tgt_mask: Mask | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """For every source token, the target token of maximal cosine similarity.

    Returns ``(indices, scores)`` shaped like the source grid; ``indices``
    holds flat row-major positions in the target grid. Masked-out target
    tokens are excluded from the search.
    """
    if src.channels != tgt.channels:
        raise ValidationError(
            f"channel mismatch: src has {src.channels}, tgt has {tgt.channels}"
        )
    tgt_tokens = _masked_target_tokens(tgt, tgt_mask)
    keep = tgt_mask.bits.reshape(-1) if tgt_mask is not None else None
    idx, score = _nn_tokens(src.tokens(), tgt_tokens, keep)
    return (
        idx.reshape(src.height, src.width),
        score.reshape(src.height, src.width),
    )


def transfer_keypoints(
    src: FeatureMap,
    tgt: FeatureMap,
    kps,
    sizes: tuple[tuple[int, int], tuple[int, int]],
    *,
    tgt_mask: Mask | None = None,
    pair_id: str = "",
    feature_tag: str = "",
) -> MatchSet:
    """Map source-image keypoints to target-image locations through the grids.

    ``sizes`` is ``((src_img_w, src_img_h), (tgt_img_w, tgt_img_h))``. Each
    keypoint snaps to its source grid cell, takes that token's dense NN in
    the target grid, and lands on the matched cell's center in target-image
    pixels. Out-of-bounds keypoints yield entries flagged with an error
    instead of failing the whole set.
    """
    (src_w, src_h), (tgt_w, tgt_h) = sizes
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    if kps.shape[0] == 0:
        return MatchSet(pair_id=pair_id, entries=(), feature_tag=feature_tag)
    if src.channels != tgt.channels:
        raise ValidationError(
            f"channel mismatch: src has {src.channels}, tgt has {tgt.channels}"
        )

    in_bounds = (
        (kps[:, 0] >= 0) & (kps[:, 0] < src_w) & (kps[:, 1] >= 0) & (kps[:, 1] < src_h)
    )
    cx = pixel_to_cell(kps[:, 0], src_w, src.width)
    cy = pixel_to_cell(kps[:, 1], src_h, src.height)
    flat = cy * src.width + cx

    tgt_tokens = _masked_target_tokens(tgt, tgt_mask)
    keep = tgt_mask.bits.reshape(-1) if tgt_mask is not None else None
    query = src.tokens()[flat[in_bounds]]
    entries: list[Correspondence | None] = [None] * kps.shape[0]
    if query.shape[0]:
        idx, score = _nn_tokens(query, tgt_tokens, keep)
        ty, tx = np.divmod(idx, tgt.width)
        px = cell_to_pixel(tx, tgt_w, tgt.width)
        py = cell_to_pixel(ty, tgt_h, tgt.height)
        j = 0
        for i in range(kps.shape[0]):
            if in_bounds[i]:
                entries[i] = Correspondence(
                    src_xy=(float(kps[i, 0]), float(kps[i, 1])),
                    tgt_xy=(float(px[j]), float(py[j])),
                    score=float(score[j]),
                )
                j += 1
    for i in range(kps.shape[0]):
        if entries[i] is None:
            entries[i] = Correspondence(
                src_xy=(float(kps[i, 0]), float(kps[i, 1])),
                tgt_xy=(float(kps[i, 0]), float(kps[i, 1])),
                score=0.0,
                error="keypoint outside source image bounds",
            )
    return MatchSet(pair_id=pair_id, entries=tuple(entries), feature_tag=feature_tag)


def _mask_for_grid(mask: Mask | None, h: int, w: int) -> Mask | None:
    if mask is None:
        return None
    if mask.bits.shape == (h, w):
        return mask
    return resize_mask(mask, h, w)


def dense_flow(
    src: FeatureMap,
    tgt: FeatureMap,
    src_mask: Mask | None = None,
    tgt_mask: Mask | None = None,
    out_dims: tuple[int, int] | None = None,
) -> FlowField:
    """Semantic flow: per-source-pixel displacement to the matched target
    location, rendered at ``out_dims = (out_h, out_w)`` resolution.

    The NN search runs at grid resolution (restricted to ``tgt_mask`` if
    given); displacements are measured between cell centers expressed in
    output pixels and bilinearly upsampled. Validity comes from
    ``src_mask`` only. ``out_dims`` defaults to the source map's recorded
    image size.
    """
    if out_dims is None:
        out_dims = (src.meta.source_image_height, src.meta.source_image_width)
    out_h, out_w = out_dims
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"out_dims must be >= 1, got {out_dims}")

    grid_tmask = _mask_for_grid(tgt_mask, tgt.height, tgt.width)
    idx, _ = nn_dense(src, tgt, grid_tmask)
    ty, tx = np.divmod(idx.astype(np.float64), tgt.width)
    sy, sx = np.meshgrid(
        np.arange(src.height, dtype=np.float64),
        np.arange(src.width, dtype=np.float64),
        indexing="ij",
    )
    du = cell_to_pixel(tx, out_w, tgt.width) - cell_to_pixel(sx, out_w, src.width)
    dv = cell_to_pixel(ty, out_h, tgt.height) - cell_to_pixel(sy, out_h, src.height)

    grid_flow = np.stack([du, dv], axis=-1)
    up = bilinear_resize_array(grid_flow, out_h, out_w)

    if src_mask is None:
        valid = Mask(bits=np.ones((out_h, out_w), dtype=bool))
    else:
        valid = (
            Mask(bits=src_mask.bits)
            if src_mask.bits.shape == (out_h, out_w)
            else resize_mask(src_mask, out_h, out_w)
        )
    return FlowField(du=up[..., 0], dv=up[..., 1], valid=valid)


def write_sflw(flow: FlowField, path) -> None:
    """Serialize a flow field: header, interleaved (du, dv) float32 pairs,
    then one validity byte per cell."""
    header = _SFLW_HEADER.pack(SFLW_MAGIC, SFLW_VERSION, flow.height, flow.width)
    pairs = np.stack([flow.du, flow.dv], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(pairs).tobytes())
        fh.write(flow.valid.bits.astype(np.uint8).tobytes())


def read_sflw(path) -> FlowField:
    with open(path, "rb") as fh:
        head = fh.read(_SFLW_HEADER.size)
        if len(head) < _SFLW_HEADER.size:
            raise ValidationError(f"{path}: file too short for SFLW header")
        magic, version, h, w = _SFLW_HEADER.unpack(head)
        if magic != SFLW_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        if version != SFLW_VERSION:
            raise ValidationError(f"{path}: unsupported SFLW version {version}")
        body = fh.read()
    expected = h * w * 8 + h * w
    if len(body) != expected:
        raise ValidationError(f"{path}: body is {len(body)} bytes, expected {expected}")
    pairs = np.frombuffer(body[: h * w * 8], dtype="<f4").reshape(h, w, 2)
    bits = np.frombuffer(body[h * w * 8 :], dtype=np.uint8).reshape(h, w) != 0
    return FlowField(du=pairs[..., 0], dv=pairs[..., 1], valid=Mask(bits=bits))
