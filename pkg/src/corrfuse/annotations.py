"""Annotation ingestion: the canonical pair-annotation JSON plus an adapter
for SPair-style benchmark files.

The canonical schema (``simple_json``) is defined by this project and is
what the README documents:

    {
      "pair_id": "pair-001",
      "category": "cat",
      "src_image_size": [width, height],
      "tgt_image_size": [width, height],
      "tgt_bbox": [x, y, width, height],          // optional
      "keypoints": [
        {"src": [x, y], "tgt": [x, y], "visible": true},
        ...
      ]
    }

Keypoints flagged invisible (or null entries in SPair files) are dropped
and counted per annotation in ``n_dropped``. Benchmark formats drift;
this internal schema does not.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from .metrics import PairAnnotation

logger = logging.getLogger(__name__)

FORMATS = ("simple_json", "spair_json")


class AnnotationError(ValueError):
    """Schema violation, reported with file and field path."""


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise AnnotationError(f"{where}: missing field '{key}'")
    return obj[key]


def _int_pair(value, where: str) -> tuple[int, int]:
    try:
        a, b = value[0], value[1]
        return int(a), int(b)
    except (TypeError, ValueError, IndexError) as exc:
        raise AnnotationError(f"{where}: expected a pair of numbers, got {value!r}") from exc


def _xy(value, where: str) -> tuple[float, float]:
    try:
        return float(value[0]), float(value[1])
    except (TypeError, ValueError, IndexError) as exc:
        raise AnnotationError(f"{where}: expected [x, y], got {value!r}") from exc


def _parse_simple(obj: dict, where: str) -> PairAnnotation:
    pair_id = str(_require(obj, "pair_id", where))
    src_w, src_h = _int_pair(_require(obj, "src_image_size", where), f"{where}: src_image_size")
    tgt_w, tgt_h = _int_pair(_require(obj, "tgt_image_size", where), f"{where}: tgt_image_size")
    bbox = obj.get("tgt_bbox")
    bbox_w = bbox_h = None
    if bbox is not None:
        try:
            bbox_w, bbox_h = int(bbox[2]), int(bbox[3])
        except (TypeError, ValueError, IndexError) as exc:
            raise AnnotationError(f"{where}: tgt_bbox must be [x, y, w, h]") from exc
    keypoints = []
    dropped = 0
    for i, kp in enumerate(_require(obj, "keypoints", where)):
        kp_where = f"{where}: keypoints[{i}]"
        if not kp.get("visible", True):
            dropped += 1
            continue
        src = _xy(_require(kp, "src", kp_where), f"{kp_where}.src")
        tgt = _xy(_require(kp, "tgt", kp_where), f"{kp_where}.tgt")
        _check_bounds(src, src_w, src_h, f"{kp_where}.src")
        _check_bounds(tgt, tgt_w, tgt_h, f"{kp_where}.tgt")
        keypoints.append((src, tgt))
    return PairAnnotation(
        pair_id=pair_id,
        src_image_w=src_w,
        src_image_h=src_h,
        tgt_image_w=tgt_w,
        tgt_image_h=tgt_h,
        keypoints=tuple(keypoints),
        category=str(obj.get("category", "")),
        tgt_bbox_w=bbox_w,
        tgt_bbox_h=bbox_h,
        n_dropped=dropped,
    )


def _check_bounds(xy: tuple[float, float], w: int, h: int, where: str):
    x, y = xy
    if not (0 <= x < w and 0 <= y < h):
        raise AnnotationError(f"{where}: keypoint {xy} outside image {w}x{h}")


def _parse_spair(obj: dict, where: str, fallback_id: str) -> PairAnnotation:
    pair_id = str(obj.get("pair_id") or obj.get("filename") or fallback_id)
    src_size = _require(obj, "src_imsize", where)
    tgt_size = _require(obj, "trg_imsize", where)
    src_w, src_h = _int_pair(src_size, f"{where}: src_imsize")
    tgt_w, tgt_h = _int_pair(tgt_size, f"{where}: trg_imsize")
    bbox = obj.get("trg_bndbox")
    bbox_w = bbox_h = None
    if bbox is not None:
        try:
            x1, y1, x2, y2 = (float(v) for v in bbox)
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"{where}: trg_bndbox must be [x1, y1, x2, y2]") from exc
        bbox_w = max(1, int(round(x2 - x1)))
        bbox_h = max(1, int(round(y2 - y1)))
    src_kps = _require(obj, "src_kps", where)
    tgt_kps = _require(obj, "trg_kps", where)
    if len(src_kps) != len(tgt_kps):
        raise AnnotationError(
            f"{where}: src_kps has {len(src_kps)} entries, trg_kps has {len(tgt_kps)}"
        )
    keypoints = []
    dropped = 0
    for i, (s, t) in enumerate(zip(src_kps, tgt_kps)):
        if s is None or t is None:
            dropped += 1
            continue
        src = _xy(s, f"{where}: src_kps[{i}]")
        tgt = _xy(t, f"{where}: trg_kps[{i}]")
        if min(src + tgt) < 0:  # negative coords mark occluded points
            dropped += 1
            continue
        _check_bounds(src, src_w, src_h, f"{where}: src_kps[{i}]")
        _check_bounds(tgt, tgt_w, tgt_h, f"{where}: trg_kps[{i}]")
        keypoints.append((src, tgt))
    return PairAnnotation(
        pair_id=pair_id,
        src_image_w=src_w,
        src_image_h=src_h,
        tgt_image_w=tgt_w,
        tgt_image_h=tgt_h,
        keypoints=tuple(keypoints),
        category=str(obj.get("category", "")),
        tgt_bbox_w=bbox_w,
        tgt_bbox_h=bbox_h,
        n_dropped=dropped,
    )


def load_annotation(path, fmt: str = "simple_json") -> PairAnnotation:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON: {exc}") from exc
    return parse_annotation(obj, fmt, where=str(path), fallback_id=path.stem)


def parse_annotation(obj: dict, fmt: str, where: str, fallback_id: str = "") -> PairAnnotation:
    if fmt == "simple_json":
        return _parse_simple(obj, where)
    if fmt == "spair_json":
        return _parse_spair(obj, where, fallback_id)
    raise AnnotationError(f"unknown annotation format {fmt!r} (known: {FORMATS})")


def ingest_annotations(dataset_path, fmt: str = "simple_json") -> list[PairAnnotation]:
    """Load every ``*.json`` under a directory (or a single file) as
    normalized annotations, sorted by pair id."""
    path = Path(dataset_path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    if not files:
        raise AnnotationError(f"{path}: no annotation files found")
    out = [load_annotation(f, fmt) for f in files]
    total_dropped = sum(a.n_dropped for a in out)
    if total_dropped:
        logger.info("dropped %d occluded/invisible keypoints", total_dropped)
    return sorted(out, key=lambda a: a.pair_id)
