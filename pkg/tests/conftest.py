import numpy as np
import pytest

from corrfuse.featmap import FeatureMap, MapMeta


def grid_map(arr, img_w=None, img_h=None, tag="fix", **params):
    arr = np.asarray(arr, dtype=np.float32)
    h, w = arr.shape[:2]
    meta = MapMeta(
        source_image_width=img_w or w * 8,
        source_image_height=img_h or h * 8,
        model_tag=tag,
        extraction_params={str(k): str(v) for k, v in params.items()},
    )
    return FeatureMap(data=arr, meta=meta)


def random_map(rng, h, w, c, img_w=None, img_h=None, unit=False):
    arr = rng.standard_normal((h, w, c)).astype(np.float32)
    if unit:
        arr /= np.linalg.norm(arr, axis=-1, keepdims=True)
    return grid_map(arr, img_w=img_w, img_h=img_h)


def rolled_pair(rng, h, w, c, shift=1, img_scale=8):
    """A source map and a target whose token rows are cyclically shifted.

    The target token at flat index i equals the source token at
    ``(i - shift) mod N`` (a roll by +shift), so the source token at j sits
    at target index ``(j + shift) mod N``: the dense-NN index grid must be
    exactly that forward shift.
    """
    src = random_map(rng, h, w, c, img_w=w * img_scale, img_h=h * img_scale, unit=True)
    tokens = src.tokens()
    rolled = np.roll(tokens, shift, axis=0).reshape(h, w, c)
    tgt = grid_map(rolled, img_w=w * img_scale, img_h=h * img_scale)
    n = h * w
    expect = (np.arange(n, dtype=np.int64) + shift) % n
    return src, tgt, expect.reshape(h, w)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call":
                continue
            nodeid = str(getattr(rep, "nodeid", ""))
            if "test_acceptance" in nodeid:
                rows.append((nodeid.split("::")[-1], status == "passed"))
    if rows:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for name, ok in rows:
            terminalreporter.write_line(f"  [{'PASS' if ok else 'FAIL'}] {name}")
