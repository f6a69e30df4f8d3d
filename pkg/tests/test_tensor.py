import numpy as np
import pytest

from atmosconv import tensor as T
from atmosconv.errors import ContractError, ShapeError, StateError
from atmosconv.gradcheck import finite_diff_grad
from atmosconv.tensor import Tensor, backward, guided_relu, no_grad


def _check_grads(build, *leaves, tol=1e-7):
    """Compare tape gradients of sum(w * build()) against finite differences."""
    for leaf in leaves:
        leaf.zero_grad()
    out = build()
    w = np.random.default_rng(0).normal(size=out.shape)
    loss = (out * Tensor(w)).sum()
    backward(loss)
    for leaf in leaves:
        num = finite_diff_grad(lambda: (build().data * w).sum(), leaf)
        np.testing.assert_allclose(leaf.grad, num, atol=tol, rtol=tol)


class TestConstruction:
    def test_float64_storage(self):
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64
        assert t.shape == (3,)
        assert t.is_leaf

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_scalar_item(self):
        assert Tensor(2.5).item() == 2.5
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_check_finite(self):
        from atmosconv.errors import NumericError
        with pytest.raises(NumericError):
            Tensor([1.0, np.nan]).check_finite()


class TestPrimitiveGradients:
    def test_add_sub_broadcast(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        _check_grads(lambda: a + b - a * 0.5, a, b)

    def test_mul_div(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.uniform(1, 2, size=(2, 3)), requires_grad=True)
        _check_grads(lambda: a * b / (b + 1.0), a, b)

    def test_rdiv_rsub(self, rng):
        a = Tensor(rng.uniform(1, 2, size=(4,)), requires_grad=True)
        _check_grads(lambda: 1.0 / a + (3.0 - a), a)

    def test_matmul(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        _check_grads(lambda: a @ b, a, b)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_reductions_and_reshape(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        _check_grads(lambda: a.sum(axis=1, keepdims=True) * a.mean(axis=(0, 2), keepdims=True), a)
        _check_grads(lambda: T.transpose(a.reshape(6, 4), (1, 0)), a)

    def test_relu_and_abs_away_from_kinks(self, rng):
        x = rng.normal(size=(5, 5))
        x[np.abs(x) < 0.05] = 0.5
        a = Tensor(x, requires_grad=True)
        _check_grads(lambda: a.relu() + a.abs() * 2.0, a)

    def test_split_pos_neg_identity(self, rng):
        a = Tensor(rng.normal(size=(10,)))
        p, n = T.split_pos_neg(a)
        np.testing.assert_array_equal(p.data - n.data, a.data)
        assert (p.data >= 0).all() and (n.data >= 0).all()


class TestBackwardContract:
    def test_non_scalar_loss(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(a * 2.0)

    def test_loss_without_grad(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.ones(3)).sum())

    def test_tape_consumed_once(self):
        a = Tensor(np.ones(3), requires_grad=True)
        loss = (a * a).sum()
        backward(loss)
        with pytest.raises(StateError):
            backward(loss)

    def test_retain_graph_accumulates(self):
        a = Tensor(np.arange(3.0), requires_grad=True)
        loss = (a * a).sum()
        backward(loss, retain_graph=True)
        backward(loss)
        np.testing.assert_array_equal(a.grad, 4 * np.arange(3.0))

    def test_shared_subexpression(self):
        a = Tensor(np.array([2.0]), requires_grad=True)
        b = a * a
        backward((b + b * 3.0).sum())
        np.testing.assert_allclose(a.grad, [16.0])

    def test_tape_order_inputs_first(self):
        a = Tensor(np.ones(2), requires_grad=True)
        tape = backward(((a * 2.0) + a).sum())
        pos = {r.output_id: i for i, r in enumerate(tape.records)}
        for i, r in enumerate(tape.records):
            for j in r.input_ids:
                if j in pos:
                    assert pos[j] < i

    def test_no_grad_records_nothing(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            b = a * 3.0
        assert not b.requires_grad and b.is_leaf

    def test_detach(self):
        a = Tensor(np.ones(2), requires_grad=True)
        d = (a * 2.0).detach()
        assert d.is_leaf and not d.requires_grad


class TestGuidedRelu:
    def test_negative_gradients_blocked(self):
        a = Tensor(np.array([1.0, 2.0, -1.0]), requires_grad=True)
        y = a.relu()
        w = Tensor(np.array([1.0, -1.0, 1.0]))
        with guided_relu():
            backward((y * w).sum())
        np.testing.assert_array_equal(a.grad, [1.0, 0.0, 0.0])

    def test_plain_relu_passes_negative(self):
        a = Tensor(np.array([1.0, 2.0, -1.0]), requires_grad=True)
        backward((a.relu() * Tensor(np.array([1.0, -1.0, 1.0]))).sum())
        np.testing.assert_array_equal(a.grad, [1.0, -1.0, 0.0])


class TestBranchRecording:
    def test_relu_masks_recorded(self):
        with T.record_branches() as log:
            Tensor(np.array([-1.0, 2.0])).relu()
        assert len(log) == 1
        np.testing.assert_array_equal(log[0], [False, True])

    def test_nothing_recorded_outside(self):
        with T.record_branches() as log:
            pass
        Tensor(np.array([1.0])).relu()
        assert log == []
