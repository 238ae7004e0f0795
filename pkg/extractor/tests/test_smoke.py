"""End-to-end smoke acceptance: extractor output drives the consumer CLI.

Three synthetic image pairs go through extraction (both models), then the
consumer's fuse/match/eval/viz subcommands. Checks: the reference channel
widths and grid sizes come out of extraction; the full pipeline runs
without error; and flow from diffusion-style features is smoother than
flow from token-style features on at least 2 of 3 pairs.
"""

import json
import subprocess
import sys
from pathlib import Path

import pytest
from PIL import Image

from corrfuse_extract.fmapio import read_fmap

from sample_scenes import scene_pair

N_PAIRS = 3
SD_CHANNELS = {"2": 1280, "5": 960, "8": 480}


def run(*args):
    proc = subprocess.run(
        [sys.executable, "-m", *map(str, args)], capture_output=True, text=True
    )
    assert proc.returncode == 0, f"{args}: {proc.stderr}"
    return proc.stdout


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    imgdir = root / "images"
    imgdir.mkdir()
    for i, seed in enumerate((11, 22, 33)):
        a, b = scene_pair(seed)
        Image.fromarray(a).save(imgdir / f"pair{i}_src.png")
        Image.fromarray(b).save(imgdir / f"pair{i}_tgt.png")

    featdir = root / "feats"
    run("corrfuse_extract.cli", "extract", "--model", "sd",
        "--images", imgdir, "--out", featdir, "--seed", "5")
    run("corrfuse_extract.cli", "extract", "--model", "dino",
        "--images", imgdir, "--out", featdir, "--seed", "5")

    pairs = []
    for i in range(N_PAIRS):
        pairs.append({
            "pair_id": f"pair{i}",
            "src_sd_layers": [f"feats/pair{i}_src.sd.{t}.fmap" for t in ("2", "5", "8")],
            "tgt_sd_layers": [f"feats/pair{i}_tgt.sd.{t}.fmap" for t in ("2", "5", "8")],
            "src_dino": f"feats/pair{i}_src.dino.11.fmap",
            "tgt_dino": f"feats/pair{i}_tgt.dino.11.fmap",
        })
    (root / "manifest.json").write_text(
        json.dumps({"schema_version": 1, "pairs": pairs})
    )
    return root


def test_extraction_reference_shapes(workspace):
    for i in range(N_PAIRS):
        for side in ("src", "tgt"):
            for tag, channels in SD_CHANNELS.items():
                data, meta = read_fmap(workspace / "feats" / f"pair{i}_{side}.sd.{tag}.fmap")
                assert data.shape[2] == channels
                assert meta["extraction_params"]["layer"] == tag
            data, meta = read_fmap(workspace / "feats" / f"pair{i}_{side}.dino.11.fmap")
            assert data.shape[:2] == (60, 60)
            assert meta["extraction_params"]["dino_facet"] == "token"


def test_pipeline_end_to_end_and_smoothness_ordering(workspace):
    # fused maps at the working alpha plus the two single-feature extremes
    for alpha, name in ((0.5, "fused"), (1.0, "sdonly"), (0.0, "dinoonly")):
        run("corrfuse", "fuse", "--manifest", workspace / "manifest.json",
            "--out-dir", workspace / name, "--alpha", alpha,
            "--method", "randomized", "--seed", "7")

    sd_smoother = 0
    for i in range(N_PAIRS):
        smooth = {}
        for name in ("sdonly", "dinoonly", "fused"):
            flow = workspace / f"{name}.pair{i}.sflw"
            run("corrfuse", "match",
                "--src", workspace / name / f"pair{i}.src.fmap",
                "--tgt", workspace / name / f"pair{i}.tgt.fmap",
                "--mode", "dense", "--out", flow, "--out-dims", "512x512")
            report = json.loads(run("corrfuse", "eval", "smoothness", "--flow", flow))
            smooth[name] = report["smoothness"]
        if smooth["sdonly"] < smooth["dinoonly"]:
            sd_smoother += 1

    # viz must also run end to end on the fused maps
    run("corrfuse", "viz", "pca-rgb",
        "--src", workspace / "fused" / "pair0.src.fmap",
        "--tgt", workspace / "fused" / "pair0.tgt.fmap",
        "--out-src", workspace / "pca_src.png",
        "--out-tgt", workspace / "pca_tgt.png")
    run("corrfuse", "viz", "flow",
        "--flow", workspace / "fused.pair0.sflw",
        "--out", workspace / "flow.png")
    assert (workspace / "pca_src.png").exists()
    assert (workspace / "flow.png").exists()

    assert sd_smoother >= 2, (
        f"diffusion-feature flow smoother on only {sd_smoother} of {N_PAIRS} pairs"
    )
