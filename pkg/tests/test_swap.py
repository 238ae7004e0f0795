import numpy as np
import pytest

from corrfuse.featmap import Mask, ValidationError
from corrfuse.swap import swap_instance

from conftest import grid_map, random_map


def color_ramp(h, w, seed=0):
    """Image where every pixel color is unique (position-coded)."""
    y, x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = np.stack([x % 256, y % 256, (x // 256 * 16 + y // 256) % 256], axis=-1)
    return img.astype(np.uint8)


def full_mask(h, w):
    return Mask(bits=np.ones((h, w), dtype=bool))


def interior_mask(h, w, band):
    bits = np.zeros((h, w), dtype=bool)
    bits[band:-band, band:-band] = True
    return Mask(bits=bits)


class TestSelfSwap:
    def test_identity_at_grid_resolution(self, rng):
        # image dims equal the grid dims: upsampling is exact, every token
        # distinct, so self-swap must reproduce the image bit for bit
        feat = random_map(rng, 12, 12, 16)
        img = color_ramp(12, 12)
        out = swap_instance(img, img, feat, feat, full_mask(12, 12), full_mask(12, 12))
        assert np.array_equal(out, img)

    def test_identity_with_interior_mask_when_upsampled(self, rng):
        # at 4x upsampling, edge clamping duplicates border-band tokens; an
        # interior instance mask keeps tokens distinct and identity exact
        feat = random_map(rng, 8, 8, 12)
        img = color_ramp(32, 32)
        mask = interior_mask(32, 32, band=3)
        out = swap_instance(img, img, feat, feat, mask, mask)
        assert np.array_equal(out, img)


class TestSwapContract:
    def test_outside_mask_untouched(self, rng):
        src_feat = random_map(rng, 6, 6, 8)
        tgt_feat = random_map(rng, 6, 6, 8)
        src_img = color_ramp(24, 24)
        tgt_img = color_ramp(24, 24)[::-1].copy()
        mask = interior_mask(24, 24, band=5)
        out = swap_instance(src_img, tgt_img, src_feat, tgt_feat, mask, mask)
        outside = ~mask.bits
        assert np.array_equal(out[outside], src_img[outside])

    def test_inside_mask_palette_containment(self, rng):
        src_feat = random_map(rng, 6, 6, 8)
        tgt_feat = random_map(rng, 6, 6, 8)
        src_img = color_ramp(24, 24)
        tgt_img = color_ramp(24, 24)[::-1].copy()
        src_m = interior_mask(24, 24, band=5)
        tgt_m = interior_mask(24, 24, band=7)
        out = swap_instance(src_img, tgt_img, src_feat, tgt_feat, src_m, tgt_m)
        tgt_palette = {tuple(px) for px in tgt_img[tgt_m.bits].reshape(-1, 3)}
        for px in out[src_m.bits].reshape(-1, 3):
            assert tuple(px) in tgt_palette

    def test_permutation_fixture_pulls_inverse(self, rng):
        # target features are the source features rolled by one column at
        # grid==image resolution; the swap must pull colors back through it
        h = w = 10
        src_feat = random_map(rng, h, w, 24, unit=True)
        tgt_feat = grid_map(np.roll(src_feat.data, 1, axis=1))
        src_img = color_ramp(h, w)
        tgt_img = color_ramp(h, w)
        out = swap_instance(
            src_img, tgt_img, src_feat, tgt_feat, full_mask(h, w), full_mask(h, w)
        )
        # source (r, c) matches target (r, c+1): colors pull from one column right
        want = np.roll(tgt_img, -1, axis=1)
        assert np.array_equal(out, want)

    def test_empty_src_mask_returns_source(self, rng, caplog):
        feat = random_map(rng, 4, 4, 4)
        img = color_ramp(16, 16)
        empty = Mask(bits=np.zeros((16, 16), dtype=bool))
        with caplog.at_level("WARNING"):
            out = swap_instance(img, img, feat, feat, empty, full_mask(16, 16))
        assert np.array_equal(out, img)
        assert any("empty" in r.message for r in caplog.records)

    def test_empty_tgt_mask_is_error(self, rng):
        feat = random_map(rng, 4, 4, 4)
        img = color_ramp(16, 16)
        with pytest.raises(ValidationError):
            swap_instance(
                img,
                img,
                feat,
                feat,
                full_mask(16, 16),
                Mask(bits=np.zeros((16, 16), dtype=bool)),
            )

    def test_deterministic(self, rng):
        src_feat = random_map(rng, 5, 5, 6)
        tgt_feat = random_map(rng, 5, 5, 6)
        src_img = color_ramp(20, 20)
        tgt_img = color_ramp(20, 20)[::-1].copy()
        m = interior_mask(20, 20, band=4)
        a = swap_instance(src_img, tgt_img, src_feat, tgt_feat, m, m)
        b = swap_instance(src_img, tgt_img, src_feat, tgt_feat, m, m)
        assert np.array_equal(a, b)

    def test_mask_dim_mismatch(self, rng):
        feat = random_map(rng, 4, 4, 4)
        img = color_ramp(16, 16)
        with pytest.raises(ValidationError):
            swap_instance(img, img, feat, feat, full_mask(8, 8), full_mask(16, 16))

    def test_different_image_sizes(self, rng):
        src_feat = random_map(rng, 6, 6, 8)
        tgt_feat = random_map(rng, 6, 6, 8)
        src_img = color_ramp(18, 18)
        tgt_img = color_ramp(30, 24)
        out = swap_instance(
            src_img,
            tgt_img,
            src_feat,
            tgt_feat,
            interior_mask(18, 18, 4),
            interior_mask(30, 24, 6),
        )
        assert out.shape == src_img.shape
