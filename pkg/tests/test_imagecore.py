import numpy as np
import pytest

from stainforge.errors import BinMismatchError, EmptySetError
from stainforge.imagecore import (
    ChannelHistogram,
    bhattacharyya,
    channel_histogram,
    hsv_to_rgb,
    quantize_u8,
    read_png,
    rgb_to_gray,
    rgb_to_hsv,
    validate_rgb,
    write_png,
)


def pixel(r, g, b):
    return np.full((8, 8, 3), (r, g, b), dtype=np.float64)


class TestRgbToGray:
    def test_white_is_one(self):
        assert rgb_to_gray(pixel(1, 1, 1)) == pytest.approx(1.0)

    def test_black_is_zero(self):
        assert rgb_to_gray(pixel(0, 0, 0)) == pytest.approx(0.0)

    def test_hand_computed_value(self):
        gray = rgb_to_gray(pixel(0.5, 0.25, 0.75))
        assert gray == pytest.approx(0.38175, abs=1e-12)

    def test_monotone_in_each_channel(self):
        rng = np.random.default_rng(3)
        base = rng.random((4, 4, 3))
        for c in range(3):
            bumped = base.copy()
            bumped[..., c] = np.minimum(1.0, bumped[..., c] + 0.1)
            assert np.all(rgb_to_gray(bumped) >= rgb_to_gray(base))

    def test_bounded_by_channel_extremes(self):
        rng = np.random.default_rng(4)
        img = rng.random((16, 16, 3))
        gray = rgb_to_gray(img)
        assert np.all(gray <= img.max(axis=-1) + 1e-12)
        assert np.all(gray >= img.min(axis=-1) - 1e-12)


class TestHsv:
    def test_pure_red(self):
        hsv = rgb_to_hsv(pixel(1, 0, 0))
        assert np.allclose(hsv[0, 0], (0.0, 1.0, 1.0))

    def test_achromatic_pixel(self):
        hsv = rgb_to_hsv(pixel(0.4, 0.4, 0.4))
        assert np.allclose(hsv[0, 0], (0.0, 0.0, 0.4))

    def test_pure_green(self):
        hsv = rgb_to_hsv(pixel(0, 1, 0))
        assert np.allclose(hsv[0, 0], (1 / 3, 1.0, 1.0))

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(7)
        img = rng.random((32, 32, 3))
        back = hsv_to_rgb(rgb_to_hsv(img))
        assert np.abs(back - img).max() < 1e-6

    def test_saturation_zero_preserves_value_exactly(self):
        v = 0.73125
        back = hsv_to_rgb(rgb_to_hsv(pixel(v, v, v)))
        assert np.all(back == v)


class TestChannelHistogram:
    def test_all_black_single_image(self):
        hist = channel_histogram([pixel(0, 0, 0)], bins=4)
        assert np.allclose(hist.mass, [[1, 0, 0, 0]] * 3)

    def test_half_black_half_white(self):
        img = np.zeros((2, 8, 3))
        img[0] = 1.0
        hist = channel_histogram([img], bins=2)
        assert np.allclose(hist.mass, 0.5)

    def test_uniform_random_within_five_sigma(self):
        rng = np.random.default_rng(11)
        img = rng.random((128, 128, 3))
        bins = 64
        hist = channel_histogram([img], bins=bins)
        n = 128 * 128
        p = 1.0 / bins
        sigma = np.sqrt(p * (1 - p) / n)
        assert np.abs(hist.mass - p).max() < 5 * sigma

    def test_value_one_lands_in_last_bin(self):
        hist = channel_histogram([pixel(1, 1, 1)], bins=8)
        assert np.allclose(hist.mass[:, -1], 1.0)

    def test_mass_conservation_across_pooled_images(self):
        rng = np.random.default_rng(12)
        images = [rng.random((6, 6, 3)) for _ in range(5)]
        hist = channel_histogram(images, bins=16)
        assert np.allclose(hist.mass.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(hist.mass >= 0)

    def test_pooling_weights_by_pixel_count(self):
        # one black image + one white image of equal size: 50/50 mass
        hist = channel_histogram([pixel(0, 0, 0), pixel(1, 1, 1)], bins=2)
        assert np.allclose(hist.mass, 0.5)

    def test_empty_set_raises(self):
        with pytest.raises(EmptySetError):
            channel_histogram([], bins=4)

    def test_too_few_bins_rejected(self):
        with pytest.raises(ValueError):
            channel_histogram([pixel(0, 0, 0)], bins=1)


def uniform_hist(mass_rows):
    mass = np.asarray(mass_rows, dtype=np.float64)
    return ChannelHistogram(bins=mass.shape[1], mass=mass)


class TestBhattacharyya:
    def test_identical_histograms(self):
        h = uniform_hist([[0.25] * 4] * 3)
        assert bhattacharyya(h, h) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_supports(self):
        p = uniform_hist([[1, 0]] * 3)
        q = uniform_hist([[0, 1]] * 3)
        assert bhattacharyya(p, q) == pytest.approx(1.0)

    def test_hand_computed_value(self):
        p = uniform_hist([[0.5, 0.5]] * 3)
        q = uniform_hist([[1.0, 0.0]] * 3)
        expected = np.sqrt(1.0 - np.sqrt(0.5))
        assert bhattacharyya(p, q) == pytest.approx(expected, abs=1e-12)
        assert round(bhattacharyya(p, q), 4) == 0.5412

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            a = rng.random((3, 8))
            b = rng.random((3, 8))
            p = uniform_hist(a / a.sum(axis=1, keepdims=True))
            q = uniform_hist(b / b.sum(axis=1, keepdims=True))
            d_pq = bhattacharyya(p, q)
            d_qp = bhattacharyya(q, p)
            assert d_pq == pytest.approx(d_qp, abs=1e-12)
            assert 0.0 <= d_pq <= 1.0

    def test_bin_mismatch(self):
        p = uniform_hist([[0.5, 0.5]] * 3)
        q = uniform_hist([[0.25] * 4] * 3)
        with pytest.raises(BinMismatchError):
            bhattacharyya(p, q)


class TestPngIo:
    def test_u8_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(17)
        u8 = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        img = u8.astype(np.float32) / 255.0
        path = tmp_path / "img.png"
        write_png(path, img)
        back = read_png(path)
        assert np.array_equal((back * 255).round().astype(np.uint8), u8)

    def test_round_half_up(self):
        # 126.5/255 quantizes to 127 under round-half-up (127.0 under
        # banker's rounding it would be 126)
        img = np.full((8, 8, 3), 126.5 / 255.0)
        assert np.all(quantize_u8(img) == 127)

    def test_grayscale_write(self, tmp_path):
        path = tmp_path / "gray.png"
        write_png(path, np.full((8, 8), 0.5))
        back = read_png(path)
        assert back.shape == (8, 8, 3)
        assert np.all(back == 128 / 255)


class TestValidateRgb:
    def test_accepts_valid(self):
        validate_rgb(np.zeros((8, 8, 3)))

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            validate_rgb(np.zeros((8, 8)))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            validate_rgb(np.full((8, 8, 3), 1.5))

    def test_rejects_indivisible(self):
        with pytest.raises(ValueError):
            validate_rgb(np.zeros((9, 8, 3)), divisor=4)

    def test_rejects_tiny(self):
        with pytest.raises(ValueError):
            validate_rgb(np.zeros((4, 8, 3)))
