import numpy as np
import pytest

from atmosconv.classic import (
    SceneSpec,
    checkerboard_scene,
    demo_response_analysis,
    dog_kernel,
    edge_columns,
    filter_image,
    gaussian_kernel,
    region_masks,
)
from atmosconv.errors import ConfigError
from atmosconv.filters import positive_weight_ratio


def correlate_same(image, k):
    """Direct zero-padded correlation, written without the conv machinery."""
    pad = k.shape[0] // 2
    xp = np.pad(image, pad)
    out = np.zeros_like(image)
    for i in range(image.shape[0]):
        for j in range(image.shape[1]):
            out[i, j] = (xp[i:i + k.shape[0], j:j + k.shape[1]] * k).sum()
    return out


class TestGaussian:
    def test_delta_limit(self):
        g = gaussian_kernel(0.1, 3).array
        assert g[1, 1] == pytest.approx(1.0, abs=1e-12)
        assert np.abs(g).sum() - g[1, 1] < 1e-12

    @pytest.mark.parametrize("sigma,size", [(0.5, 3), (1.0, 5), (2.0, 9), (3.0, 7)])
    def test_unit_sum(self, sigma, size):
        g = gaussian_kernel(sigma, size)
        assert g.array.sum() == pytest.approx(1.0, abs=1e-12)
        assert g.ratio == 1.0

    def test_rotation_symmetry_bit_equal(self):
        g = gaussian_kernel(1.0, 5).array
        np.testing.assert_array_equal(np.rot90(g), g)

    @pytest.mark.parametrize("size", [2, 4, 1])
    def test_bad_size(self, size):
        with pytest.raises(ConfigError):
            gaussian_kernel(1.0, size)


class TestDog:
    def test_normalized_is_differencing(self):
        k = dog_kernel(normalized=True)
        assert positive_weight_ratio(k) == pytest.approx(0.0, abs=1e-12)

    def test_unnormalized_ratio(self):
        k = dog_kernel(normalized=False)
        assert positive_weight_ratio(k) == pytest.approx(1 / 3, abs=1e-12)
        assert k.pos_sum == pytest.approx(2.0)
        assert k.neg_sum == pytest.approx(1.0)

    def test_constant_image_gives_zero_inside(self):
        img = np.full((32, 32), 0.6)
        resp = filter_image(img, dog_kernel())
        # away from the zero padding
        np.testing.assert_allclose(resp[4:-4, 4:-4], 0.0, atol=1e-10)

    def test_sigma_order(self):
        with pytest.raises(ConfigError):
            dog_kernel(2.0, 1.0)

    def test_filter_image_matches_direct_loop(self, rng):
        img = rng.random((20, 20))
        k = dog_kernel(normalized=False, size=5).array
        np.testing.assert_allclose(filter_image(img, k), correlate_same(img, k), atol=1e-12)


class TestScene:
    def test_uniform_two_values(self):
        img = checkerboard_scene(SceneSpec())
        assert img.shape == (128, 128)
        np.testing.assert_array_equal(np.unique(img), [0.25, 0.75])

    def test_ramp_left_darker(self):
        img = checkerboard_scene(SceneSpec(illumination="linear_ramp", lo=0.5, hi=1.5))
        assert img[:, 0].mean() < img[:, -1].mean()
        assert img.min() >= 0 and img.max() <= 1.5 * 0.75 + 1e-12

    def test_invalid_specs(self):
        with pytest.raises(ConfigError):
            SceneSpec(lo=1.5, hi=0.5)
        with pytest.raises(ConfigError):
            SceneSpec(illumination="spot")
        with pytest.raises(ConfigError):
            SceneSpec(tiles=0)


class TestRegions:
    def test_interior_margin(self):
        interior, band = region_masks(64, 16, 9)
        assert not (interior & band).any()
        rows = np.where(interior[:16].any(axis=1))[0]
        np.testing.assert_array_equal(rows, np.arange(5, 11))

    def test_band_touches_boundaries(self):
        _, band = region_masks(64, 16, 9)
        assert band[20, 16] and band[20, 15]
        assert not band[20, 8]


class TestDemo:
    def test_constant_image_normalized_dog(self):
        stats = demo_response_analysis(np.full((64, 64), 0.4), dog_kernel(), 16)
        assert stats.flat_bias == pytest.approx(0.0, abs=1e-10)
        assert stats.edge_mag == pytest.approx(0.0, abs=1e-10)

    def test_kernel_larger_than_tile(self):
        with pytest.raises(ConfigError):
            demo_response_analysis(np.zeros((64, 64)), dog_kernel(size=9), 8)

    def test_ramp_ratio_ordering(self):
        img = checkerboard_scene(SceneSpec(illumination="linear_ramp", lo=0.5, hi=1.5))
        norm = demo_response_analysis(img, dog_kernel(normalized=True), 16)
        raw = demo_response_analysis(img, dog_kernel(normalized=False), 16)
        assert norm.ratio * 5 <= raw.ratio

    def test_edges_localize_at_same_columns(self):
        img = checkerboard_scene(SceneSpec())
        a = edge_columns(demo_response_analysis(img, dog_kernel(normalized=True), 16).profile, 16)
        b = edge_columns(demo_response_analysis(img, dog_kernel(normalized=False), 16).profile, 16)
        np.testing.assert_array_equal(a, b)
        assert np.all(np.abs(a - np.arange(16, 128, 16)) <= 2)

    def test_offset_invariance_and_residual(self, rng):
        img = checkerboard_scene(SceneSpec(illumination="linear_ramp", lo=0.5, hi=1.5))
        interior = (slice(8, -8), slice(8, -8))
        for o in rng.uniform(-0.5, 0.5, size=5):
            norm = dog_kernel(normalized=True)
            d = filter_image(img + o, norm) - filter_image(img, norm)
            np.testing.assert_allclose(d[interior], 0.0, atol=1e-9)
            raw = dog_kernel(normalized=False)
            d = filter_image(img + o, raw) - filter_image(img, raw)
            np.testing.assert_allclose(d[interior], o * raw.l1 * raw.ratio, atol=1e-9)
