import numpy as np
import pytest
from scipy.special import log_softmax

from atmosconv.errors import ConfigError, ContractError, ShapeError
from atmosconv.functional import (conv2d, global_avg_pool, max_pool2d, softmax_cross_entropy,
                                  standardize)
from atmosconv.gradcheck import finite_diff_grad
from atmosconv.tensor import Tensor, backward


def naive_conv(x, w, stride=1, padding=0):
    """Direct loop cross-correlation, the reference for conv2d."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, f, i, j] += (w[f, ch, u, v]
                                                    * xp[b, ch, i * stride + u, j * stride + v])
    return out


CONV_CASES = [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 3), (3, 1, 2), (1, 0, 5)]


class TestConv2d:
    @pytest.mark.parametrize("stride,padding,k", CONV_CASES)
    def test_matches_loop_oracle(self, rng, stride, padding, k):
        x = rng.normal(size=(2, 3, 7, 8))
        w = rng.normal(size=(4, 3, k, k))
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w), stride, padding).data,
                                   naive_conv(x, w, stride, padding), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,k", CONV_CASES)
    def test_gradients(self, rng, stride, padding, k):
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, k, k)), requires_grad=True)
        wts = rng.normal(size=conv2d(x, w, stride, padding).shape)
        backward((conv2d(x, w, stride, padding) * Tensor(wts)).sum())
        f = lambda: (conv2d(x, w, stride, padding).data * wts).sum()
        np.testing.assert_allclose(x.grad, finite_diff_grad(f, x), atol=1e-7)
        np.testing.assert_allclose(w.grad, finite_diff_grad(f, w), atol=1e-7)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_bad_stride_and_empty_output(self):
        x, w = Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))
        with pytest.raises(ConfigError):
            conv2d(x, w, stride=0)
        with pytest.raises(ConfigError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), w)

    def test_wrong_rank(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((4, 4))), Tensor(np.ones((1, 1, 3, 3))))


class TestPooling:
    def test_max_pool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(max_pool2d(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])

    def test_max_pool_odd_extent_drops_last(self, rng):
        assert max_pool2d(Tensor(rng.normal(size=(1, 2, 5, 7)))).shape == (1, 2, 2, 3)

    def test_max_pool_gradient_routes_to_argmax(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        wts = rng.normal(size=(2, 2, 2, 2))
        backward((max_pool2d(x) * Tensor(wts)).sum())
        num = finite_diff_grad(lambda: (max_pool2d(x).data * wts).sum(), x)
        np.testing.assert_allclose(x.grad, num, atol=1e-8)

    def test_max_pool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward(max_pool2d(x).sum())
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_global_avg_pool(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
        np.testing.assert_allclose(global_avg_pool(x).data, x.data.mean(axis=(2, 3)))
        backward(global_avg_pool(x).sum())
        np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 20))


class TestSoftmaxCrossEntropy:
    def test_value_matches_scipy(self, rng):
        z = rng.normal(size=(5, 4)) * 10
        y = np.array([0, 3, 1, 1, 2])
        expect = -log_softmax(z, axis=1)[np.arange(5), y].mean()
        assert softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(expect, rel=1e-12)

    def test_gradient(self, rng):
        z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        y = np.array([2, 0, 1, 2])
        backward(softmax_cross_entropy(z, y))
        num = finite_diff_grad(lambda: softmax_cross_entropy(z, y).item(), z)
        np.testing.assert_allclose(z.grad, num, atol=1e-9)

    def test_label_checks(self):
        with pytest.raises(ContractError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
        with pytest.raises(ShapeError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0])


class TestStandardize:
    @pytest.mark.parametrize("axes", [(0, 2, 3), (2, 3)])
    def test_zero_mean_unit_var(self, rng, axes):
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))
        out, _, _ = standardize(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), axes)
        np.testing.assert_allclose(out.data.mean(axis=axes), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=axes), 1.0, rtol=1e-4)

    @pytest.mark.parametrize("axes", [(0, 2, 3), (2, 3)])
    def test_gradients(self, rng, axes):
        x = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
        g = Tensor(rng.normal(size=2), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        wts = rng.normal(size=x.shape)
        backward((standardize(x, g, b, axes)[0] * Tensor(wts)).sum())
        f = lambda: (standardize(x, g, b, axes)[0].data * wts).sum()
        for t in (x, g, b):
            np.testing.assert_allclose(t.grad, finite_diff_grad(f, t), atol=1e-7)

    def test_fixed_statistics_are_constants(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        g = Tensor(np.array([2.0, 3.0]))
        out, _, _ = standardize(x, g, Tensor(np.zeros(2)), (0, 2, 3), eps=0.0,
                                mean=np.zeros(2), var=np.ones(2))
        backward(out.sum())
        np.testing.assert_allclose(x.grad[:, 0], 2.0)
        np.testing.assert_allclose(x.grad[:, 1], 3.0)
