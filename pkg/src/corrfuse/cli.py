"""Command-line front-end: fuse, match, eval, cluster, swap, viz.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 data-format
error. Failures print a machine-readable JSON object to stderr
(``{"error": {"type", "message"}}``); stdout carries only each
subcommand's declared JSON report. Verbosity comes from the CORRFUSE_LOG
environment variable (debug/info/warning/error, default warning), logged
to stderr. All randomness is controlled by explicit ``--seed`` flags, and
reruns with the same seed produce byte-identical outputs, including under
``--jobs N``.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import multiprocessing
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import AnnotationError, FORMATS, ingest_annotations, load_annotation
from .featmap import (
    FeatureMap,
    FmapCorruptError,
    FmapFormatError,
    Mask,
    ValidationError,
    read_fmap,
    resize_mask,
    write_fmap,
)
from .fusion import FusionConfig, fuse_pair
from .images import load_image_rgb, load_mask_png, save_image_png
from .matching import (
    MatchSet,
    dense_flow,
    read_sflw,
    transfer_keypoints,
    write_sflw,
)
from .metrics import (
    EvalReport,
    PairAnnotation,
    flow_smoothness,
    outcome_distribution,
    pck_correct,
)
from .parts import kmeans, match_clusters
from .swap import swap_instance
from .viz import cluster_label_image, pca_rgb, render_flow

logger = logging.getLogger("corrfuse")

MANIFEST_SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class DataFormatError(Exception):
    pass


@dataclass(frozen=True)
class PairManifest:
    """One pair's worth of file references, resolved relative to the
    manifest file."""

    pair_id: str
    src_sd_layers: tuple[Path, ...] = ()
    tgt_sd_layers: tuple[Path, ...] = ()
    src_dino: Path | None = None
    tgt_dino: Path | None = None
    src_image: Path | None = None
    tgt_image: Path | None = None
    src_mask: Path | None = None
    tgt_mask: Path | None = None
    annotation: dict | None = None
    annotation_path: Path | None = None


def load_manifest(path) -> list[PairManifest]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataFormatError(f"{path}: manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if obj.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataFormatError(
            f"{path}: schema_version must be {MANIFEST_SCHEMA_VERSION}, "
            f"got {obj.get('schema_version')!r}"
        )
    pairs = obj.get("pairs")
    if not isinstance(pairs, list) or not pairs:
        raise DataFormatError(f"{path}: 'pairs' must be a nonempty list")
    base = path.parent

    def resolve(p):
        return None if p is None else (base / p)

    out = []
    for i, pair in enumerate(pairs):
        where = f"{path}: pairs[{i}]"
        if "pair_id" not in pair:
            raise DataFormatError(f"{where}: missing pair_id")
        out.append(
            PairManifest(
                pair_id=str(pair["pair_id"]),
                src_sd_layers=tuple(resolve(p) for p in pair.get("src_sd_layers", [])),
                tgt_sd_layers=tuple(resolve(p) for p in pair.get("tgt_sd_layers", [])),
                src_dino=resolve(pair.get("src_dino")),
                tgt_dino=resolve(pair.get("tgt_dino")),
                src_image=resolve(pair.get("src_image")),
                tgt_image=resolve(pair.get("tgt_image")),
                src_mask=resolve(pair.get("src_mask")),
                tgt_mask=resolve(pair.get("tgt_mask")),
                annotation=pair.get("annotation"),
                annotation_path=resolve(pair.get("annotation_path")),
            )
        )
    return out


def _load_fmap(path) -> FeatureMap:
    try:
        return read_fmap(path)
    except FileNotFoundError as exc:
        raise DataFormatError(f"{path}: file not found") from exc
    except (FmapFormatError, FmapCorruptError, ValidationError) as exc:
        raise DataFormatError(str(exc)) from exc


def _load_mask(path) -> Mask:
    try:
        return load_mask_png(path)
    except FileNotFoundError as exc:
        raise DataFormatError(f"{path}: file not found") from exc
    except (OSError, ValidationError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def _load_image(path) -> np.ndarray:
    try:
        return load_image_rgb(path)
    except FileNotFoundError as exc:
        raise DataFormatError(f"{path}: file not found") from exc
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def _parse_dims(text: str) -> tuple[int, int]:
    """'WxH' -> (h, w)."""
    try:
        w, h = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"expected WxH dimensions, got {text!r}") from exc


def _parse_kappas(text: str) -> list[str]:
    kappas = [k.strip() for k in text.split(",") if k.strip()]
    if not kappas:
        raise UsageError("no kappa values given")
    for k in kappas:
        try:
            if float(k) <= 0:
                raise ValueError
        except ValueError:
            raise UsageError(f"kappa must be a positive number, got {k!r}") from None
    return kappas


# ---------------------------------------------------------------- fuse

def _fusion_config(args) -> FusionConfig:
    if args.method == "randomized" and args.seed is None:
        raise UsageError("--method randomized requires --seed")
    target_h, target_w = _parse_dims(args.target)
    try:
        return FusionConfig(
            alpha=args.alpha,
            pca_dim=args.pca_dim,
            target_h=target_h,
            target_w=target_w,
            method=args.method,
            oversample=args.oversample,
            power_iters=args.power_iters,
            seed=args.seed,
        )
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc


def _fuse_one(pair: PairManifest, cfg: FusionConfig, out_dir: str) -> dict:
    if not pair.src_sd_layers or not pair.tgt_sd_layers:
        raise DataFormatError(f"pair {pair.pair_id}: missing sd layer paths")
    if pair.src_dino is None or pair.tgt_dino is None:
        raise DataFormatError(f"pair {pair.pair_id}: missing dino paths")
    src_layers = [_load_fmap(p) for p in pair.src_sd_layers]
    tgt_layers = [_load_fmap(p) for p in pair.tgt_sd_layers]
    src_dino = _load_fmap(pair.src_dino)
    tgt_dino = _load_fmap(pair.tgt_dino)
    fused_src, fused_tgt = fuse_pair(src_layers, tgt_layers, src_dino, tgt_dino, cfg)
    out = Path(out_dir)
    src_path = out / f"{pair.pair_id}.src.fmap"
    tgt_path = out / f"{pair.pair_id}.tgt.fmap"
    write_fmap(fused_src, src_path)
    write_fmap(fused_tgt, tgt_path)
    return {
        "pair_id": pair.pair_id,
        "src_fmap": str(src_path),
        "tgt_fmap": str(tgt_path),
        "height": fused_src.height,
        "width": fused_src.width,
        "channels": fused_src.channels,
    }


def cmd_fuse(args) -> int:
    cfg = _fusion_config(args)
    pairs = load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = max(1, args.jobs)
    if jobs == 1 or len(pairs) == 1:
        results = [_fuse_one(p, cfg, str(out_dir)) for p in pairs]
    else:
        # spawn keeps worker state independent of parent BLAS threads
        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=min(jobs, len(pairs)), mp_context=ctx
        ) as pool:
            results = list(pool.map(_fuse_one, pairs, [cfg] * len(pairs), [str(out_dir)] * len(pairs)))
    print(json.dumps({"pairs": results}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- match

def cmd_match(args) -> int:
    src = _load_fmap(args.src)
    tgt = _load_fmap(args.tgt)
    tgt_mask = _load_mask(args.tgt_mask) if args.tgt_mask else None
    if args.mode == "dense":
        src_mask = _load_mask(args.src_mask) if args.src_mask else None
        out_dims = _parse_dims(args.out_dims) if args.out_dims else None
        flow = dense_flow(src, tgt, src_mask=src_mask, tgt_mask=tgt_mask, out_dims=out_dims)
        write_sflw(flow, args.out)
        print(json.dumps(
            {"flow": args.out, "height": flow.height, "width": flow.width},
            sort_keys=True,
        ))
        return 0
    # keypoint mode
    if not args.annotation:
        raise UsageError("--mode keypoints requires --annotation")
    try:
        ann = load_annotation(args.annotation, args.format)
    except AnnotationError as exc:
        raise DataFormatError(str(exc)) from exc
    grid_tgt_mask = (
        resize_mask(tgt_mask, tgt.height, tgt.width) if tgt_mask is not None else None
    )
    matches = transfer_keypoints(
        src,
        tgt,
        ann.src_keypoints(),
        ((ann.src_image_w, ann.src_image_h), (ann.tgt_image_w, ann.tgt_image_h)),
        tgt_mask=grid_tgt_mask,
        pair_id=ann.pair_id,
        feature_tag=args.feature_tag,
    )
    Path(args.out).write_text(matches.to_json())
    print(json.dumps(
        {"matches": args.out, "n_entries": len(matches.entries), "pair_id": ann.pair_id},
        sort_keys=True,
    ))
    return 0


# ---------------------------------------------------------------- eval

def _load_matchsets(path) -> dict[str, MatchSet]:
    p = Path(path)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    if not files:
        raise DataFormatError(f"{path}: no match files found")
    out = {}
    for f in files:
        try:
            ms = MatchSet.from_json(f.read_text())
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{f}: not a valid match set: {exc}") from exc
        out[ms.pair_id] = ms
    return out


def _load_annotations(path, fmt) -> list[PairAnnotation]:
    try:
        return ingest_annotations(path, fmt)
    except AnnotationError as exc:
        raise DataFormatError(str(exc)) from exc
    except (ValidationError, FileNotFoundError) as exc:
        raise DataFormatError(str(exc)) from exc


def _paired(matchsets: dict[str, MatchSet], anns: list[PairAnnotation]):
    missing = [a.pair_id for a in anns if a.pair_id not in matchsets]
    if missing:
        raise DataFormatError(f"no matches for annotated pairs: {', '.join(missing)}")
    return [(matchsets[a.pair_id], a) for a in anns]


def cmd_eval_pck(args) -> int:
    kappas = _parse_kappas(args.kappas)
    pairs = _paired(_load_matchsets(args.matches), _load_annotations(args.annotations, args.format))
    correct: dict[str, list[np.ndarray]] = {k: [] for k in kappas}
    per_cat: dict[str, dict[str, list[np.ndarray]]] = {}
    n_kp = 0
    for ms, ann in pairs:
        n_kp += len(ann.keypoints)
        for k in kappas:
            c = pck_correct(ms, ann, float(k), args.mode)
            correct[k].append(c)
            per_cat.setdefault(ann.category or "uncategorized", {}).setdefault(k, []).append(c)
    report = EvalReport(
        per_kappa_pck={
            k: float(np.concatenate(v).mean() * 100.0) for k, v in correct.items()
        },
        per_category_pck={
            cat: {k: float(np.concatenate(v).mean() * 100.0) for k, v in d.items()}
            for cat, d in per_cat.items()
        },
        n_keypoints=n_kp,
    )
    if args.csv:
        report.write_category_csv(args.csv)
    print(report.to_json())
    return 0


def cmd_eval_smoothness(args) -> int:
    try:
        flow = read_sflw(args.flow)
    except (ValidationError, FileNotFoundError) as exc:
        raise DataFormatError(str(exc)) from exc
    report = EvalReport(smoothness=flow_smoothness(flow))
    print(report.to_json())
    return 0


def cmd_eval_outcomes(args) -> int:
    anns = _load_annotations(args.annotations, args.format)
    pairs_a = _paired(_load_matchsets(args.matches_a), anns)
    pairs_b = _paired(_load_matchsets(args.matches_b), anns)
    correct_a = np.concatenate(
        [pck_correct(ms, ann, args.kappa, args.mode) for ms, ann in pairs_a]
    )
    correct_b = np.concatenate(
        [pck_correct(ms, ann, args.kappa, args.mode) for ms, ann in pairs_b]
    )
    report = EvalReport(
        outcomes=outcome_distribution(correct_a, correct_b),
        n_keypoints=int(correct_a.size),
    )
    print(report.to_json())
    return 0


# ---------------------------------------------------------------- cluster

def cmd_cluster(args) -> int:
    fmap = _load_fmap(args.fmap)
    result = kmeans(fmap, k=args.k, seed=args.seed, max_iters=args.max_iters)
    cluster_label_image(result.labels, args.k).save(args.out_labels, format="PNG")
    summary = {
        "k": args.k,
        "inertia": round(result.inertia, 6),
        "labels": args.out_labels,
        "feature": str(args.fmap),
    }
    if args.tgt:
        tgt = _load_fmap(args.tgt)
        tgt_result = kmeans(tgt, k=args.k, seed=args.seed, max_iters=args.max_iters)
        if args.out_tgt_labels:
            cluster_label_image(tgt_result.labels, args.k).save(
                args.out_tgt_labels, format="PNG"
            )
            summary["tgt_labels"] = args.out_tgt_labels
        match = match_clusters(result, tgt_result)
        summary["assignment"] = list(match.assignment)
        summary["assignment_cost"] = round(match.cost, 6)
        summary["tgt_inertia"] = round(tgt_result.inertia, 6)
        if args.out_assignment:
            Path(args.out_assignment).write_text(
                json.dumps(
                    {"assignment": list(match.assignment), "cost": match.cost},
                    sort_keys=True,
                )
            )
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------- swap

def cmd_swap(args) -> int:
    out = swap_instance(
        _load_image(args.src_image),
        _load_image(args.tgt_image),
        _load_fmap(args.src_feat),
        _load_fmap(args.tgt_feat),
        _load_mask(args.src_mask),
        _load_mask(args.tgt_mask),
    )
    save_image_png(out, args.out)
    print(json.dumps({"out": args.out}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- viz

def cmd_viz_pca(args) -> int:
    src = _load_fmap(args.src)
    tgt = _load_fmap(args.tgt)

    def grid_mask(path, fmap):
        if not path:
            return None
        return resize_mask(_load_mask(path), fmap.height, fmap.width)

    img_s, img_t = pca_rgb(
        src,
        tgt,
        src_mask=grid_mask(args.src_mask, src),
        tgt_mask=grid_mask(args.tgt_mask, tgt),
    )
    save_image_png(img_s, args.out_src)
    save_image_png(img_t, args.out_tgt)
    print(json.dumps({"src": args.out_src, "tgt": args.out_tgt}, sort_keys=True))
    return 0


def cmd_viz_flow(args) -> int:
    try:
        flow = read_sflw(args.flow)
    except (ValidationError, FileNotFoundError) as exc:
        raise DataFormatError(str(exc)) from exc
    bg = None
    if args.bg_mask:
        bg = _load_mask(args.bg_mask)
        if bg.bits.shape != (flow.height, flow.width):
            bg = resize_mask(bg, flow.height, flow.width)
    save_image_png(render_flow(flow, bg_mask=bg), args.out)
    print(json.dumps({"out": args.out}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrfuse",
        description="Semantic correspondence from fused feature grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="ensemble + fuse feature maps for manifest pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--pca-dim", type=int, default=256)
    p.add_argument("--target", default="60x60", help="working grid as WxH")
    p.add_argument("--method", choices=["exact", "randomized"], default="exact")
    p.add_argument("--oversample", type=int, default=10)
    p.add_argument("--power-iters", type=int, default=2)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("match", help="dense flow or keypoint transfer between two maps")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--mode", choices=["dense", "keypoints"], default="dense")
    p.add_argument("--out", required=True)
    p.add_argument("--out-dims", default=None, help="flow resolution as WxH")
    p.add_argument("--src-mask", default=None)
    p.add_argument("--tgt-mask", default=None)
    p.add_argument("--annotation", default=None)
    p.add_argument("--format", choices=list(FORMATS), default="simple_json")
    p.add_argument("--feature-tag", default="")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="evaluate matches, flow, or feature agreement")
    esub = p.add_subparsers(dest="eval_command", required=True)

    e = esub.add_parser("pck", help="percentage of correct keypoints")
    e.add_argument("--matches", required=True, help="match-set JSON file or directory")
    e.add_argument("--annotations", required=True, help="annotation file or directory")
    e.add_argument("--format", choices=list(FORMATS), default="simple_json")
    e.add_argument("--kappas", default="0.05,0.10,0.15")
    e.add_argument("--mode", choices=["bbox", "image"], default="bbox")
    e.add_argument("--csv", default=None, help="write per-category table here")
    e.set_defaults(func=cmd_eval_pck)

    e = esub.add_parser("smoothness", help="mean first-order flow difference")
    e.add_argument("--flow", required=True)
    e.set_defaults(func=cmd_eval_smoothness)

    e = esub.add_parser("outcomes", help="4-way agreement of two feature variants")
    e.add_argument("--matches-a", required=True)
    e.add_argument("--matches-b", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--format", choices=list(FORMATS), default="simple_json")
    e.add_argument("--kappa", type=float, default=0.10)
    e.add_argument("--mode", choices=["bbox", "image"], default="bbox")
    e.set_defaults(func=cmd_eval_outcomes)

    p = sub.add_parser("cluster", help="k-means parts, optionally matched across a pair")
    p.add_argument("--fmap", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--tgt", default=None)
    p.add_argument("--out-tgt-labels", default=None)
    p.add_argument("--out-assignment", default=None)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("swap", help="pixel-level instance swap via dense matches")
    p.add_argument("--src-image", required=True)
    p.add_argument("--tgt-image", required=True)
    p.add_argument("--src-feat", required=True)
    p.add_argument("--tgt-feat", required=True)
    p.add_argument("--src-mask", required=True)
    p.add_argument("--tgt-mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("viz", help="render feature or flow visualizations")
    vsub = p.add_subparsers(dest="viz_command", required=True)

    v = vsub.add_parser("pca-rgb", help="joint 3-component false color of a pair")
    v.add_argument("--src", required=True)
    v.add_argument("--tgt", required=True)
    v.add_argument("--src-mask", default=None)
    v.add_argument("--tgt-mask", default=None)
    v.add_argument("--out-src", required=True)
    v.add_argument("--out-tgt", required=True)
    v.set_defaults(func=cmd_viz_pca)

    v = vsub.add_parser("flow", help="hue/saturation flow wheel rendering")
    v.add_argument("--flow", required=True)
    v.add_argument("--bg-mask", default=None)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_flow)

    return parser


def _setup_logging():
    level = os.environ.get("CORRFUSE_LOG", "warning").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _emit_error(kind: str, message: str):
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message}}) + "\n")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 2
    except DataFormatError as exc:
        _emit_error("data-format", str(exc))
        return 3
    except (ValidationError, AnnotationError, OSError) as exc:
        _emit_error("runtime", str(exc))
        return 1
    except Exception as exc:  # keep stderr machine-readable even for bugs
        logger.exception("unhandled failure")
        _emit_error("runtime", f"{type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
