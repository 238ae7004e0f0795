"""Feature-map data model, FMAP binary serialization, and resampling primitives.

A feature map is an H x W grid of C-dimensional descriptors plus metadata
about the image it was extracted from. Everything downstream (fusion,
matching, clustering, swapping) consumes this type, so the layout and the
resampling conventions are pinned here:

* FMAP file layout (all integers little-endian):
  ``"FMAP" | version:u32=1 | H:u32 | W:u32 | C:u32 | meta_len:u32 |
  meta (UTF-8 JSON, meta_len bytes) | payload (H*W*C float32, row-major,
  channel-last)``
* Resampling uses pixel-center alignment: grid cell ``i`` covers
  ``[i, i+1)`` in source units and is sampled at its center. This makes
  the keypoint-to-grid mapping in the matching module exactly invertible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1

_HEADER = struct.Struct("<4sIIIII")  # magic, version, H, W, C, meta_len


class FmapFormatError(ValueError):
    """File is not an FMAP file or has an unsupported version."""


class FmapCorruptError(ValueError):
    """Header and payload disagree (truncated or inconsistent file)."""


class ValidationError(ValueError):
    """A domain invariant was violated (bad dims, non-finite values, ...)."""


@dataclass(frozen=True)
class MapMeta:
    """Provenance of a feature map: source image size and extraction settings.

    ``extraction_params`` is a free-form text map (e.g. diffusion timestep,
    layer index, facet) stamped by the extractor.
    """

    source_image_width: int
    source_image_height: int
    model_tag: str = ""
    extraction_params: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.source_image_width < 1 or self.source_image_height < 1:
            raise ValidationError(
                f"source image dims must be >= 1, got "
                f"{self.source_image_width}x{self.source_image_height}"
            )

    def to_json(self) -> str:
        return json.dumps(
            {
                "source_image_width": self.source_image_width,
                "source_image_height": self.source_image_height,
                "model_tag": self.model_tag,
                "extraction_params": dict(sorted(self.extraction_params.items())),
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "MapMeta":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FmapFormatError(f"meta block is not valid JSON: {exc}") from exc
        try:
            return cls(
                source_image_width=int(obj["source_image_width"]),
                source_image_height=int(obj["source_image_height"]),
                model_tag=str(obj.get("model_tag", "")),
                extraction_params={
                    str(k): str(v) for k, v in obj.get("extraction_params", {}).items()
                },
            )
        except KeyError as exc:
            raise FmapFormatError(f"meta block missing field: {exc}") from exc


@dataclass(frozen=True)
class FeatureMap:
    """An immutable H x W grid of C-dimensional float32 descriptors.

    ``data`` has shape (height, width, channels), row-major, channel-last.
    Instances are safe to share across threads; all operations on them are
    pure functions returning new maps.
    """

    data: np.ndarray
    meta: MapMeta

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValidationError(f"data must be 3-d (H, W, C), got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1 or c < 1:
            raise ValidationError(f"all dims must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("feature map contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def tokens(self) -> np.ndarray:
        """The (H*W, C) row-major token matrix (read-only view)."""
        return self.data.reshape(-1, self.channels)

    def with_data(self, data: np.ndarray) -> "FeatureMap":
        """New map with the same meta and different values."""
        return FeatureMap(data=data, meta=self.meta)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and self.meta == other.meta
        )


@dataclass(frozen=True)
class Mask:
    """Boolean grid annotating a feature grid or an image (True = inside)."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.bits, dtype=bool))
        if arr.ndim != 2:
            raise ValidationError(f"mask must be 2-d, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())


def write_fmap(fmap: FeatureMap, path) -> None:
    """Serialize ``fmap`` to ``path`` in the FMAP format.

    Identical maps produce byte-identical files (meta JSON keys are sorted).
    """
    meta_bytes = fmap.meta.to_json().encode("utf-8")
    header = _HEADER.pack(
        FMAP_MAGIC,
        FMAP_VERSION,
        fmap.height,
        fmap.width,
        fmap.channels,
        len(meta_bytes),
    )
    payload = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(meta_bytes)
        fh.write(payload)


def read_fmap(path) -> FeatureMap:
    """Read an FMAP file, validating magic, version, dims, and finiteness."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FmapFormatError(f"{path}: file too short for FMAP header")
        magic, version, h, w, c, meta_len = _HEADER.unpack(head)
        if magic != FMAP_MAGIC:
            raise FmapFormatError(f"{path}: bad magic {magic!r}, expected {FMAP_MAGIC!r}")
        if version != FMAP_VERSION:
            raise FmapFormatError(f"{path}: unsupported FMAP version {version}")
        if h < 1 or w < 1 or c < 1:
            raise FmapCorruptError(f"{path}: non-positive dims {h}x{w}x{c} in header")
        meta_bytes = fh.read(meta_len)
        if len(meta_bytes) != meta_len:
            raise FmapCorruptError(f"{path}: truncated meta block")
        payload = fh.read()
    expected = h * w * c * 4
    if len(payload) != expected:
        raise FmapCorruptError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if not np.isfinite(data).all():
        raise ValidationError(f"{path}: payload contains NaN or Inf")
    meta = MapMeta.from_json(meta_bytes.decode("utf-8"))
    return FeatureMap(data=data, meta=meta)


def _sample_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel-center source coordinates for resizing n_in -> n_out cells.

    Returns (low index, high index, fraction); coordinates are clamped to
    the valid range so edge cells replicate outward.
    """
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    centers = np.clip(centers, 0.0, n_in - 1.0)
    lo = np.floor(centers).astype(np.int64)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = centers - lo
    return lo, hi, frac


def bilinear_resize_array(src: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Array-level bilinear resampling of an (H, W, C) grid; see
    :func:`bilinear_resize` for the conventions."""
    if new_h < 1 or new_w < 1:
        raise ValidationError(f"target dims must be >= 1, got {new_h}x{new_w}")
    h, w, c = src.shape
    if (new_h, new_w) == (h, w):
        return np.asarray(src, dtype=np.float32)
    src = np.asarray(src, dtype=np.float64)
    ry_lo, ry_hi, fy = _sample_coords(new_h, h)
    rx_lo, rx_hi, fx = _sample_coords(new_w, w)

    out = np.empty((new_h, new_w, c), dtype=np.float32)
    block = max(1, (1 << 25) // max(1, new_w * c))
    fxc = fx[None, :, None]
    for start in range(0, new_h, block):
        stop = min(start + block, new_h)
        # Interpolate rows first, then columns; lerp form keeps constants exact.
        top = src[ry_lo[start:stop]]
        bottom = src[ry_hi[start:stop]]
        rows = top + fy[start:stop, None, None] * (bottom - top)
        left = rows[:, rx_lo]
        right = rows[:, rx_hi]
        out[start:stop] = left + fxc * (right - left)
    return out


def bilinear_resize(fmap: FeatureMap, new_h: int, new_w: int) -> FeatureMap:
    """Resample a feature map to a new grid size with bilinear interpolation.

    Pixel-center alignment, edges clamped. Interpolation runs in float64 in
    lerp form (``a + f*(b-a)``) so constant maps are preserved exactly and
    per-channel min/max are never exceeded. Output rows are processed in
    blocks to bound intermediate memory when upsampling to image resolution.
    """
    if new_h == fmap.height and new_w == fmap.width:
        if new_h < 1 or new_w < 1:
            raise ValidationError(f"target dims must be >= 1, got {new_h}x{new_w}")
        return fmap
    return fmap.with_data(bilinear_resize_array(fmap.data, new_h, new_w))


def resize_mask(mask: Mask, new_h: int, new_w: int) -> Mask:
    """Nearest-neighbor mask resampling under the same pixel-center mapping."""
    if new_h == mask.height and new_w == mask.width:
        return mask
    ry = _nearest_coords(new_h, mask.height)
    rx = _nearest_coords(new_w, mask.width)
    return Mask(bits=mask.bits[np.ix_(ry, rx)])


def _nearest_coords(n_out: int, n_in: int) -> np.ndarray:
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    idx = np.floor(centers + 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def l2_normalize(fmap: FeatureMap) -> FeatureMap:
    """Scale every token to unit Euclidean norm; all-zero tokens stay zero."""
    return fmap.with_data(normalize_tokens(fmap.data))


def normalize_tokens(arr: np.ndarray) -> np.ndarray:
    """L2-normalize along the last axis, passing zero vectors through."""
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    return (arr / np.where(norms > 0.0, norms, 1.0)).astype(np.float32)
