import numpy as np
import pytest

from stainforge.imagecore import rgb_to_gray
from stainforge.stainremoval import color_mask, gm_batch, make_gm


def pixel_image(r, g, b, size=8):
    return np.full((size, size, 3), (r, g, b), dtype=np.float64)


def brute_force_mask(img):
    """Per-pixel comparator, the mask oracle."""
    h, w, _ = img.shape
    out = np.zeros((h, w), dtype=np.float32)
    for i in range(h):
        for j in range(w):
            r, g, b = img[i, j]
            if r > g and r > b:
                out[i, j] = 1.0
    return out


class TestColorMask:
    def test_red_dominant(self):
        assert np.all(color_mask(pixel_image(0.8, 0.4, 0.2)) == 1)

    def test_blue_dominant(self):
        assert np.all(color_mask(pixel_image(0.2, 0.4, 0.8)) == 0)

    def test_exact_tie_maps_to_zero(self):
        assert np.all(color_mask(pixel_image(0.5, 0.5, 0.5)) == 0)

    def test_partial_ties(self):
        assert np.all(color_mask(pixel_image(0.6, 0.6, 0.2)) == 0)  # R == G
        assert np.all(color_mask(pixel_image(0.6, 0.2, 0.6)) == 0)  # R == B
        assert np.all(color_mask(pixel_image(0.6, 0.5, 0.2)) == 1)

    def test_agrees_with_brute_force_including_ties(self):
        rng = np.random.default_rng(23)
        img = rng.integers(0, 5, size=(40, 40, 3)).astype(np.float64) / 4.0
        assert np.array_equal(color_mask(img), brute_force_mask(img))
        img = rng.random((32, 32, 3))
        assert np.array_equal(color_mask(img), brute_force_mask(img))

    def test_mask_is_binary(self):
        rng = np.random.default_rng(24)
        mask = color_mask(rng.random((16, 16, 3)))
        assert set(np.unique(mask)) <= {0.0, 1.0}


class TestMakeGm:
    def test_all_red_image(self):
        gm = make_gm(pixel_image(1.0, 0.0, 0.0))
        assert np.allclose(gm.gray, 0.299, atol=1e-7)
        assert np.all(gm.mask == 1)

    def test_all_gray_image(self):
        gm = make_gm(pixel_image(0.6, 0.6, 0.6))
        assert np.allclose(gm.gray, 0.6, atol=1e-7)
        assert np.all(gm.mask == 0)

    def test_checkerboard_red_blue(self):
        img = np.zeros((8, 8, 3))
        red_cells = (np.indices((8, 8)).sum(axis=0) % 2).astype(bool)
        img[red_cells] = (0.9, 0.1, 0.2)
        img[~red_cells] = (0.1, 0.2, 0.9)
        gm = make_gm(img)
        assert np.array_equal(gm.mask.astype(bool), red_cells)
        assert np.array_equal(gm.mask, brute_force_mask(img))

    def test_gray_channel_matches_rgb_to_gray(self):
        rng = np.random.default_rng(29)
        img = rng.random((16, 16, 3))
        gm = make_gm(img)
        assert np.allclose(gm.gray, rgb_to_gray(img), atol=1e-7)

    def test_deterministic_and_repeatable(self):
        rng = np.random.default_rng(31)
        img = rng.random((12, 12, 3))
        a, b = make_gm(img), make_gm(img)
        assert np.array_equal(a.gray, b.gray)
        assert np.array_equal(a.mask, b.mask)

    def test_hue_invariance_of_gray_channel(self):
        # two tints with matched luma but different hue: identical gray plane
        red = pixel_image(0.7, 0.3, 0.4)
        luma = 0.299 * 0.7 + 0.587 * 0.3 + 0.114 * 0.4
        g_b = 0.5
        # solve R so that R-weighted luma matches, holding G = B = g_b
        r = (luma - (0.587 + 0.114) * g_b) / 0.299
        other = pixel_image(r, g_b, g_b)
        gm_red, gm_other = make_gm(red), make_gm(other)
        assert np.allclose(gm_red.gray, gm_other.gray, atol=1e-7)
        assert not np.allclose(red, other)

    def test_stacked_layout(self):
        gm = make_gm(pixel_image(0.9, 0.1, 0.1))
        stacked = gm.stacked()
        assert stacked.shape == (8, 8, 2)
        assert np.array_equal(stacked[..., 0], gm.gray)
        assert np.array_equal(stacked[..., 1], gm.mask)


class TestGmBatch:
    def test_matches_per_image_make_gm(self):
        rng = np.random.default_rng(37)
        images = rng.random((5, 8, 8, 3)).astype(np.float32)
        batch = gm_batch(images)
        assert batch.shape == (5, 2, 8, 8)
        for i, img in enumerate(images):
            gm = make_gm(img)
            assert np.allclose(batch[i, 0], gm.gray, atol=1e-6)
            assert np.array_equal(batch[i, 1], gm.mask)
