"""Extraction CLI: ``corrfuse-extract extract --model sd|dino --config
cfg.json --images dir --out dir``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config or data
error. The run summary (one line per written file) goes to stdout as JSON;
logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from .backends import BackendUnavailable
from .config import ConfigError, ExtractConfig
from .pipeline import extract_directory

logger = logging.getLogger("corrfuse_extract")

MODEL_BY_FLAG = {"sd": "sd_unet", "dino": "dino_vit"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrfuse-extract",
        description="Dump diffusion/ViT feature grids as FMAP files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="run one model over an image directory")
    p.add_argument("--model", choices=sorted(MODEL_BY_FLAG), required=True)
    p.add_argument("--config", default=None, help="ExtractConfig JSON file")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", default=None, help="override the config's backend")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(
            logging, os.environ.get("CORRFUSE_LOG", "warning").upper(), logging.WARNING
        ),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = (
            ExtractConfig.from_json_file(args.config)
            if args.config
            else ExtractConfig()
        )
        overrides = {"model": MODEL_BY_FLAG[args.model]}
        if args.backend is not None:
            overrides["backend"] = args.backend
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = replace(cfg, **overrides)
    except ConfigError as exc:
        sys.stderr.write(json.dumps({"error": {"type": "config", "message": str(exc)}}) + "\n")
        return 3
    try:
        written = extract_directory(args.images, cfg, args.out)
    except (BackendUnavailable, ConfigError) as exc:
        sys.stderr.write(json.dumps({"error": {"type": "config", "message": str(exc)}}) + "\n")
        return 3
    except FileNotFoundError as exc:
        sys.stderr.write(json.dumps({"error": {"type": "data", "message": str(exc)}}) + "\n")
        return 3
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("extraction failed")
        sys.stderr.write(
            json.dumps({"error": {"type": "runtime", "message": f"{type(exc).__name__}: {exc}"}})
            + "\n"
        )
        return 1
    print(json.dumps({"written": [str(p) for p in written]}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
