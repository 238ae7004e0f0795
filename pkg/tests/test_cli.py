import json
import subprocess
import sys

import numpy as np
import pytest

from corrfuse.featmap import read_fmap, write_fmap
from corrfuse.images import save_image_png, save_mask_png
from corrfuse.featmap import Mask
from corrfuse.matching import MatchSet, read_sflw

from conftest import grid_map, random_map


def run_cli(*args, env=None):
    proc = subprocess.run(
        [sys.executable, "-m", "corrfuse", *map(str, args)],
        capture_output=True,
        text=True,
        env=env,
    )
    return proc.returncode, proc.stdout, proc.stderr


def write_pair_fixture(tmp_path, rng, grid=6, sd_channels=(12, 8), dino_channels=5):
    """Manifest with one pair of multi-layer sd maps + dino maps."""
    paths = {}
    for side in ("src", "tgt"):
        layers = []
        for li, c in enumerate(sd_channels):
            m = random_map(rng, grid, grid, c, img_w=grid * 8, img_h=grid * 8)
            p = tmp_path / f"{side}.sd{li}.fmap"
            write_fmap(m, p)
            layers.append(p.name)
        paths[f"{side}_sd_layers"] = layers
        dino = random_map(rng, grid, grid, dino_channels, img_w=grid * 8, img_h=grid * 8)
        dp = tmp_path / f"{side}.dino.fmap"
        write_fmap(dino, dp)
        paths[f"{side}_dino"] = dp.name
    manifest = {
        "schema_version": 1,
        "pairs": [{"pair_id": "p0", **paths}],
    }
    mp = tmp_path / "manifest.json"
    mp.write_text(json.dumps(manifest))
    return mp


def write_annotation(tmp_path, name="ann.json", n=3, img=48, pair_id="p0"):
    kps = []
    for i in range(n):
        xy = [8.0 + 10 * i, 8.0 + 10 * i]
        kps.append({"src": xy, "tgt": xy})
    obj = {
        "pair_id": pair_id,
        "category": "fixture",
        "src_image_size": [img, img],
        "tgt_image_size": [img, img],
        "tgt_bbox": [0, 0, img // 2, img // 2],
        "keypoints": kps,
    }
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


class TestFuseCommand:
    def test_fuse_writes_expected_channels(self, tmp_path, rng):
        manifest = write_pair_fixture(tmp_path, rng)
        out = tmp_path / "out"
        code, stdout, stderr = run_cli(
            "fuse", "--manifest", manifest, "--out-dir", out,
            "--pca-dim", 8, "--target", "6x6",
        )
        assert code == 0, stderr
        summary = json.loads(stdout)
        assert summary["pairs"][0]["channels"] == 8 + 5
        fused = read_fmap(out / "p0.src.fmap")
        assert (fused.height, fused.width, fused.channels) == (6, 6, 13)

    def test_alpha_out_of_range_is_usage_error(self, tmp_path, rng):
        manifest = write_pair_fixture(tmp_path, rng)
        code, stdout, stderr = run_cli(
            "fuse", "--manifest", manifest, "--out-dir", tmp_path / "o", "--alpha", 1.5,
        )
        assert code == 2
        err = json.loads(stderr.strip().splitlines()[-1])
        assert err["error"]["type"] == "usage"

    def test_randomized_without_seed_is_usage_error(self, tmp_path, rng):
        manifest = write_pair_fixture(tmp_path, rng)
        code, _, stderr = run_cli(
            "fuse", "--manifest", manifest, "--out-dir", tmp_path / "o",
            "--method", "randomized",
        )
        assert code == 2

    def test_corrupt_fmap_is_data_format_error(self, tmp_path, rng):
        manifest = write_pair_fixture(tmp_path, rng)
        (tmp_path / "src.sd0.fmap").write_bytes(b"XXXX" + b"\x00" * 64)
        code, _, stderr = run_cli(
            "fuse", "--manifest", manifest, "--out-dir", tmp_path / "o",
            "--pca-dim", 8, "--target", "6x6",
        )
        assert code == 3
        err = json.loads(stderr.strip().splitlines()[-1])
        assert err["error"]["type"] == "data-format"

    def test_missing_manifest(self, tmp_path):
        code, _, _ = run_cli("fuse", "--manifest", tmp_path / "nope.json", "--out-dir", tmp_path)
        assert code == 3

    def test_deterministic_rerun(self, tmp_path, rng):
        manifest = write_pair_fixture(tmp_path, rng)
        outs = []
        for name in ("o1", "o2"):
            out = tmp_path / name
            code, _, stderr = run_cli(
                "fuse", "--manifest", manifest, "--out-dir", out,
                "--pca-dim", 8, "--target", "6x6", "--method", "randomized", "--seed", 5,
            )
            assert code == 0, stderr
            outs.append((out / "p0.src.fmap").read_bytes())
        assert outs[0] == outs[1]


class TestMatchCommand:
    def test_dense_self_pair_zero_flow(self, tmp_path, rng):
        m = random_map(rng, 5, 5, 8, img_w=40, img_h=40)
        p = tmp_path / "m.fmap"
        write_fmap(m, p)
        out = tmp_path / "flow.sflw"
        code, stdout, stderr = run_cli(
            "match", "--src", p, "--tgt", p, "--mode", "dense", "--out", out,
            "--out-dims", "40x40",
        )
        assert code == 0, stderr
        flow = read_sflw(out)
        assert np.abs(flow.du).max() == 0.0
        assert np.abs(flow.dv).max() == 0.0

    def test_keypoints_mode_writes_matchset(self, tmp_path, rng):
        m = random_map(rng, 6, 6, 8, img_w=48, img_h=48)
        p = tmp_path / "m.fmap"
        write_fmap(m, p)
        ann = write_annotation(tmp_path, img=48)
        out = tmp_path / "matches.json"
        code, stdout, stderr = run_cli(
            "match", "--src", p, "--tgt", p, "--mode", "keypoints",
            "--annotation", ann, "--out", out, "--feature-tag", "fixture",
        )
        assert code == 0, stderr
        ms = MatchSet.from_json(out.read_text())
        assert len(ms.entries) == 3
        assert ms.feature_tag == "fixture"

    def test_keypoints_requires_annotation(self, tmp_path, rng):
        p = tmp_path / "m.fmap"
        write_fmap(random_map(rng, 3, 3, 4), p)
        code, _, _ = run_cli(
            "match", "--src", p, "--tgt", p, "--mode", "keypoints", "--out", tmp_path / "x.json",
        )
        assert code == 2


class TestEvalCommands:
    def make_matches(self, tmp_path, ann_path, targets=None, name="matches.json"):
        obj = json.loads(ann_path.read_text())
        entries = []
        for kp in obj["keypoints"]:
            tgt = kp["tgt"] if targets is None else targets.pop(0)
            entries.append({"src": kp["src"], "tgt": tgt, "score": 1.0})
        ms = {"pair_id": obj["pair_id"], "feature_tag": "t", "entries": entries}
        p = tmp_path / name
        p.write_text(json.dumps(ms))
        return p

    def test_pck_exact_predictions(self, tmp_path):
        ann = write_annotation(tmp_path, img=48)
        matches = self.make_matches(tmp_path, ann)
        code, stdout, stderr = run_cli(
            "eval", "pck", "--matches", matches, "--annotations", ann,
            "--kappas", "0.05,0.10,0.15",
        )
        assert code == 0, stderr
        report = json.loads(stdout)
        assert report["per_kappa_pck"] == {"0.05": 100.0, "0.10": 100.0, "0.15": 100.0}
        assert report["n_keypoints"] == 3

    def test_pck_csv_export(self, tmp_path):
        ann = write_annotation(tmp_path, img=48)
        matches = self.make_matches(tmp_path, ann)
        csv_out = tmp_path / "table.csv"
        code, _, _ = run_cli(
            "eval", "pck", "--matches", matches, "--annotations", ann, "--csv", csv_out,
        )
        assert code == 0
        assert csv_out.read_text().startswith("category,")

    def test_outcomes_enumeration_fixture(self, tmp_path):
        ann = write_annotation(tmp_path, n=4, img=48)
        obj = json.loads(ann.read_text())
        gt = [kp["tgt"] for kp in obj["keypoints"]]
        far = [[40.0, 40.0]] * 4
        # a = [T, T, F, F], b = [T, F, T, F]
        a_targets = [gt[0], gt[1], far[2], far[3]]
        b_targets = [gt[0], far[1], gt[2], far[3]]
        ma = self.make_matches(tmp_path, ann, list(a_targets), name="a.json")
        mb = self.make_matches(tmp_path, ann, list(b_targets), name="b.json")
        code, stdout, stderr = run_cli(
            "eval", "outcomes", "--matches-a", ma, "--matches-b", mb,
            "--annotations", ann, "--kappa", "0.10",
        )
        assert code == 0, stderr
        outcomes = json.loads(stdout)["outcomes"]
        assert outcomes == {
            "both_fail": 25.0,
            "a_fails_b_correct": 25.0,
            "a_correct_b_fails": 25.0,
            "both_correct": 25.0,
        }

    def test_smoothness_constant_flow(self, tmp_path, rng):
        m = random_map(rng, 5, 5, 6, img_w=20, img_h=20)
        p = tmp_path / "m.fmap"
        write_fmap(m, p)
        flow_path = tmp_path / "f.sflw"
        code, _, _ = run_cli(
            "match", "--src", p, "--tgt", p, "--mode", "dense",
            "--out", flow_path, "--out-dims", "20x20",
        )
        assert code == 0
        code, stdout, _ = run_cli("eval", "smoothness", "--flow", flow_path)
        assert code == 0
        assert json.loads(stdout)["smoothness"] == 0.0


class TestClusterCommand:
    def test_cluster_pair_with_assignment(self, tmp_path, rng):
        src = random_map(rng, 8, 8, 6)
        p1 = tmp_path / "a.fmap"
        write_fmap(src, p1)
        # same tokens: matched clustering must exist
        p2 = tmp_path / "b.fmap"
        write_fmap(src, p2)
        code, stdout, stderr = run_cli(
            "cluster", "--fmap", p1, "--k", 3, "--seed", 4,
            "--out-labels", tmp_path / "la.png",
            "--tgt", p2, "--out-tgt-labels", tmp_path / "lb.png",
            "--out-assignment", tmp_path / "assign.json",
        )
        assert code == 0, stderr
        summary = json.loads(stdout)
        assert sorted(summary["assignment"]) == [0, 1, 2]
        assert (tmp_path / "la.png").exists()
        assert (tmp_path / "lb.png").exists()
        assignment = json.loads((tmp_path / "assign.json").read_text())
        assert assignment["assignment"] == summary["assignment"]


class TestSwapCommand:
    def test_self_swap_identity(self, tmp_path, rng):
        h = w = 16
        feat = random_map(rng, h, w, 8)
        fp = tmp_path / "f.fmap"
        write_fmap(feat, fp)
        img = (rng.random((h, w, 3)) * 255).astype(np.uint8)
        ip = tmp_path / "img.png"
        save_image_png(img, ip)
        mask = Mask(bits=np.ones((h, w), dtype=bool))
        mp = tmp_path / "mask.png"
        save_mask_png(mask, mp)
        out = tmp_path / "out.png"
        code, stdout, stderr = run_cli(
            "swap", "--src-image", ip, "--tgt-image", ip,
            "--src-feat", fp, "--tgt-feat", fp,
            "--src-mask", mp, "--tgt-mask", mp, "--out", out,
        )
        assert code == 0, stderr
        from corrfuse.images import load_image_rgb

        assert np.array_equal(load_image_rgb(out), img)


class TestVizCommands:
    def test_pca_rgb_outputs(self, tmp_path, rng):
        a = random_map(rng, 6, 6, 9)
        b = random_map(rng, 6, 6, 9)
        pa, pb = tmp_path / "a.fmap", tmp_path / "b.fmap"
        write_fmap(a, pa)
        write_fmap(b, pb)
        code, stdout, stderr = run_cli(
            "viz", "pca-rgb", "--src", pa, "--tgt", pb,
            "--out-src", tmp_path / "a.png", "--out-tgt", tmp_path / "b.png",
        )
        assert code == 0, stderr
        assert (tmp_path / "a.png").exists() and (tmp_path / "b.png").exists()

    def test_flow_render(self, tmp_path, rng):
        m = random_map(rng, 5, 5, 6, img_w=20, img_h=20)
        p = tmp_path / "m.fmap"
        write_fmap(m, p)
        flow_path = tmp_path / "f.sflw"
        run_cli("match", "--src", p, "--tgt", p, "--mode", "dense", "--out", flow_path)
        code, _, stderr = run_cli("viz", "flow", "--flow", flow_path, "--out", tmp_path / "f.png")
        assert code == 0, stderr
        assert (tmp_path / "f.png").exists()


class TestExactVsRandomizedDownstream:
    def test_pck_gap_below_half_point(self, tmp_path):
        # rank-deficient layers with the target tokens a known permutation
        # of the source: both PCA routes must preserve the matching and land
        # within 0.5 PCK of each other on the downstream synthetic eval
        rng = np.random.default_rng(55)
        grid, img = 10, 80
        shift = 3
        layer_specs = [(24, 8), (16, 6)]  # (channels, rank)
        pair = {"pair_id": "p0"}
        for side_idx, side in enumerate(("src", "tgt")):
            layers = []
            for li, (c, rank) in enumerate(layer_specs):
                if side == "src":
                    tokens = (
                        rng.standard_normal((grid * grid, rank))
                        @ rng.standard_normal((rank, c))
                    ).astype(np.float32)
                    write_fmap(
                        grid_map(tokens.reshape(grid, grid, c), img_w=img, img_h=img),
                        tmp_path / f"src.sd{li}.fmap",
                    )
                else:
                    src_map = read_fmap(tmp_path / f"src.sd{li}.fmap")
                    rolled = np.roll(src_map.tokens(), shift, axis=0)
                    write_fmap(
                        grid_map(rolled.reshape(grid, grid, c), img_w=img, img_h=img),
                        tmp_path / f"tgt.sd{li}.fmap",
                    )
                layers.append(f"{side}.sd{li}.fmap")
            pair[f"{side}_sd_layers"] = layers
        dino_src = grid_map(
            rng.standard_normal((grid, grid, 6)).astype(np.float32), img_w=img, img_h=img
        )
        write_fmap(dino_src, tmp_path / "src.dino.fmap")
        rolled = np.roll(dino_src.tokens(), shift, axis=0).reshape(grid, grid, 6)
        write_fmap(grid_map(rolled, img_w=img, img_h=img), tmp_path / "tgt.dino.fmap")
        pair["src_dino"] = "src.dino.fmap"
        pair["tgt_dino"] = "tgt.dino.fmap"
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"schema_version": 1, "pairs": [pair]}))

        # keypoints at cell centers, ground truth at the rolled cells
        from corrfuse.matching import cell_to_pixel

        kps = []
        for r in range(0, grid, 2):
            for c in range(0, grid, 2):
                flat = (r * grid + c + shift) % (grid * grid)
                tr, tc = divmod(flat, grid)
                kps.append(
                    {
                        "src": [float(cell_to_pixel(c, img, grid)), float(cell_to_pixel(r, img, grid))],
                        "tgt": [float(cell_to_pixel(tc, img, grid)), float(cell_to_pixel(tr, img, grid))],
                    }
                )
        ann_path = tmp_path / "ann.json"
        ann_path.write_text(
            json.dumps(
                {
                    "pair_id": "p0",
                    "src_image_size": [img, img],
                    "tgt_image_size": [img, img],
                    "keypoints": kps,
                }
            )
        )

        pcks = {}
        for method, extra in (
            ("exact", []),
            ("randomized", ["--power-iters", 4, "--seed", 9]),
        ):
            out = tmp_path / method
            out.mkdir()
            code, _, stderr = run_cli(
                "fuse", "--manifest", manifest, "--out-dir", out,
                "--pca-dim", 12, "--target", f"{grid}x{grid}",
                "--method", method, *extra,
            )
            assert code == 0, stderr
            code, _, stderr = run_cli(
                "match", "--src", out / "p0.src.fmap", "--tgt", out / "p0.tgt.fmap",
                "--mode", "keypoints", "--annotation", ann_path,
                "--out", out / "matches.json",
            )
            assert code == 0, stderr
            code, stdout, stderr = run_cli(
                "eval", "pck", "--matches", out / "matches.json",
                "--annotations", ann_path, "--kappas", "0.10", "--mode", "image",
            )
            assert code == 0, stderr
            pcks[method] = json.loads(stdout)["per_kappa_pck"]["0.10"]
        assert abs(pcks["exact"] - pcks["randomized"]) < 0.5


class TestStdoutDiscipline:
    def test_stdout_is_pure_json(self, tmp_path, rng):
        import os

        manifest = write_pair_fixture(tmp_path, rng)
        env = dict(os.environ, CORRFUSE_LOG="debug")
        code, stdout, _ = run_cli(
            "fuse", "--manifest", manifest, "--out-dir", tmp_path / "o",
            "--pca-dim", 8, "--target", "6x6", env=env,
        )
        assert code == 0
        json.loads(stdout)  # single parseable document
