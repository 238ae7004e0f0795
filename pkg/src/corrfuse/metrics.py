"""Correspondence evaluation: PCK, flow smoothness, outcome distribution."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .featmap import ValidationError
from .matching import FlowField, MatchSet


@dataclass(frozen=True)
class PairAnnotation:
    """Ground truth for one image pair: keypoint correspondences plus the
    sizes needed for thresholding. ``keypoints`` is a list of
    ``((src_x, src_y), (tgt_x, tgt_y))`` pairs."""

    pair_id: str
    src_image_w: int
    src_image_h: int
    tgt_image_w: int
    tgt_image_h: int
    keypoints: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    category: str = ""
    tgt_bbox_w: int | None = None
    tgt_bbox_h: int | None = None
    n_dropped: int = 0

    def __post_init__(self):
        for name in ("src_image_w", "src_image_h", "tgt_image_w", "tgt_image_h"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{self.pair_id}: {name} must be >= 1")
        if (self.tgt_bbox_w is None) != (self.tgt_bbox_h is None):
            raise ValidationError(f"{self.pair_id}: bbox needs both dims")
        if self.tgt_bbox_w is not None and (self.tgt_bbox_w < 1 or self.tgt_bbox_h < 1):
            raise ValidationError(f"{self.pair_id}: bbox dims must be >= 1")
        for i, (src, tgt) in enumerate(self.keypoints):
            sx, sy = src
            tx, ty = tgt
            if not (0 <= sx < self.src_image_w and 0 <= sy < self.src_image_h):
                raise ValidationError(
                    f"{self.pair_id}: keypoint {i} source coords {src} outside "
                    f"{self.src_image_w}x{self.src_image_h}"
                )
            if not (0 <= tx < self.tgt_image_w and 0 <= ty < self.tgt_image_h):
                raise ValidationError(
                    f"{self.pair_id}: keypoint {i} target coords {tgt} outside "
                    f"{self.tgt_image_w}x{self.tgt_image_h}"
                )

    def src_keypoints(self) -> list[tuple[float, float]]:
        return [src for src, _ in self.keypoints]


@dataclass
class EvalReport:
    per_kappa_pck: dict[str, float] = field(default_factory=dict)
    per_category_pck: dict[str, dict[str, float]] = field(default_factory=dict)
    n_keypoints: int = 0
    smoothness: float | None = None
    outcomes: dict[str, float] | None = None

    def to_json_obj(self) -> dict:
        obj: dict = {
            "per_kappa_pck": {k: round(v, 4) for k, v in sorted(self.per_kappa_pck.items())},
            "per_category_pck": {
                cat: {k: round(v, 4) for k, v in sorted(d.items())}
                for cat, d in sorted(self.per_category_pck.items())
            },
            "n_keypoints": self.n_keypoints,
        }
        if self.smoothness is not None:
            obj["smoothness"] = round(self.smoothness, 6)
        if self.outcomes is not None:
            obj["outcomes"] = {k: round(v, 4) for k, v in self.outcomes.items()}
        return obj

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, indent=indent)

    def write_category_csv(self, path) -> None:
        """Per-category PCK table, one row per category, one column per kappa."""
        kappas = sorted(self.per_kappa_pck)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["category"] + [f"pck@{k}" for k in kappas])
            for cat in sorted(self.per_category_pck):
                row = self.per_category_pck[cat]
                writer.writerow([cat] + [f"{row.get(k, float('nan')):.2f}" for k in kappas])
            writer.writerow(["all"] + [f"{self.per_kappa_pck[k]:.2f}" for k in kappas])


def keypoint_distances(matches: MatchSet, ann: PairAnnotation) -> np.ndarray:
    """Euclidean prediction-to-ground-truth distance per keypoint; entries
    flagged with an error count as infinitely wrong."""
    if len(matches.entries) != len(ann.keypoints):
        raise ValidationError(
            f"{ann.pair_id}: {len(matches.entries)} matches vs "
            f"{len(ann.keypoints)} annotated keypoints"
        )
    if not ann.keypoints:
        raise ValidationError(f"{ann.pair_id}: no keypoints to evaluate")
    out = np.empty(len(ann.keypoints), dtype=np.float64)
    for i, (entry, (_, tgt_gt)) in enumerate(zip(matches.entries, ann.keypoints)):
        if entry.error is not None:
            out[i] = np.inf
        else:
            dx = entry.tgt_xy[0] - tgt_gt[0]
            dy = entry.tgt_xy[1] - tgt_gt[1]
            out[i] = np.hypot(dx, dy)
    return out


def pck_threshold(ann: PairAnnotation, kappa: float, threshold_mode: str) -> float:
    if kappa <= 0:
        raise ValidationError(f"kappa must be > 0, got {kappa}")
    if threshold_mode == "bbox":
        if ann.tgt_bbox_w is None:
            raise ValidationError(f"{ann.pair_id}: bbox threshold requested, no bbox")
        return kappa * max(ann.tgt_bbox_h, ann.tgt_bbox_w)
    if threshold_mode == "image":
        return kappa * max(ann.tgt_image_h, ann.tgt_image_w)
    raise ValidationError(f"threshold_mode must be 'bbox' or 'image', got {threshold_mode!r}")


def pck_correct(matches: MatchSet, ann: PairAnnotation, kappa: float, threshold_mode: str) -> np.ndarray:
    """Per-keypoint correctness under the kappa * max(h, w) threshold
    (inclusive comparison)."""
    return keypoint_distances(matches, ann) <= pck_threshold(ann, kappa, threshold_mode)


def pck(matches: MatchSet, ann: PairAnnotation, kappa: float, threshold_mode: str = "bbox") -> float:
    """Percentage of keypoints within kappa * max(h, w) of ground truth."""
    correct = pck_correct(matches, ann, kappa, threshold_mode)
    return float(correct.mean() * 100.0)


def flow_smoothness(flow: FlowField) -> float:
    """Mean L1 first-order difference of the flow over valid neighbor pairs.

    Horizontal and vertical forward differences both contribute; a pair is
    skipped when either cell is invalid. Zero for constant flow.
    """
    v = flow.valid.bits
    du = flow.du.astype(np.float64)
    dv = flow.dv.astype(np.float64)
    diffs = []
    if flow.width > 1:
        keep = v[:, :-1] & v[:, 1:]
        d = np.abs(np.diff(du, axis=1)) + np.abs(np.diff(dv, axis=1))
        diffs.append(d[keep])
    if flow.height > 1:
        keep = v[:-1, :] & v[1:, :]
        d = np.abs(np.diff(du, axis=0)) + np.abs(np.diff(dv, axis=0))
        diffs.append(d[keep])
    total = np.concatenate(diffs) if diffs else np.empty(0)
    if total.size == 0:
        raise ValidationError("flow has no valid neighboring cell pairs")
    return float(total.mean())


OUTCOME_KEYS = ("both_fail", "a_fails_b_correct", "a_correct_b_fails", "both_correct")


def outcome_distribution(correct_a, correct_b) -> dict[str, float]:
    """Percentages of the four agreement cells between two per-keypoint
    correctness vectors; cells sum to 100."""
    a = np.asarray(correct_a, dtype=bool)
    b = np.asarray(correct_b, dtype=bool)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValidationError(
            f"outcome vectors must be equal-length and nonempty, got {a.shape} vs {b.shape}"
        )
    n = a.size
    cells = (
        np.sum(~a & ~b),
        np.sum(~a & b),
        np.sum(a & ~b),
        np.sum(a & b),
    )
    return {k: float(c) * 100.0 / n for k, c in zip(OUTCOME_KEYS, cells)}
