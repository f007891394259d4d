"""Tensor core: op semantics, broadcasting, gradients, finiteness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nutime import tensor as T
from nutime.tensor import NonFiniteError, Tensor

from helpers import gradcheck

rng = np.random.default_rng(7)


# -- forward semantics -------------------------------------------------------


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_allclose(out.data, a)

    def test_zeros_annihilate(self):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(rng.normal(size=(3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_allclose(out.data, [[17.0], [39.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched(self):
        a = rng.normal(size=(4, 2, 3))
        b = rng.normal(size=(4, 3, 5))
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b.astype(out.data.dtype), rtol=1e-4)


class TestLayerNorm:
    def test_already_standardized(self):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)),
                           Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-2)

    def test_constant_row_returns_beta(self):
        beta = np.array([0.5, -0.5, 1.5])
        out = T.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)),
                           Tensor(beta))
        np.testing.assert_allclose(out.data[0], beta, atol=1e-6)

    def test_hand_example(self):
        out = T.layer_norm(Tensor([[0.0, 2.0, 4.0]]), Tensor(np.ones(3)),
                           Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data[0], [-1.2247, 0.0, 1.2247],
                                   atol=1e-3)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            T.layer_norm(Tensor([[1.0]]), Tensor(np.ones(1)), Tensor(np.zeros(1)))
        with pytest.raises(ValueError):
            T.layer_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), eps=0.0)

    @given(arrays(np.float64, (3, 8),
                  elements=st.floats(-100, 100, allow_nan=False)))
    @settings(max_examples=50, deadline=None)
    def test_rows_standardized(self, x):
        with T.dtype_mode(np.float64):
            out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        # the normalization contract holds where input variance dwarfs eps
        big = x.var(axis=-1) > 1e-2
        np.testing.assert_allclose(out.data[big].mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.data[big].var(axis=-1), 1.0, atol=1e-3)


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3)

    def test_overflow_stability(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_log_ratios(self):
        out = T.softmax(Tensor(np.log([1.0, 2.0, 3.0])))
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], rtol=1e-6)

    @given(arrays(np.float64, (4, 6),
                  elements=st.floats(-50, 50, allow_nan=False)),
           st.floats(-100, 100, allow_nan=False))
    @settings(max_examples=50, deadline=None)
    def test_simplex_and_shift_invariance(self, x, c):
        out = T.softmax(Tensor(x))
        assert np.all(out.data >= 0)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
        shifted = T.softmax(Tensor(x + c))
        np.testing.assert_allclose(shifted.data, out.data, atol=1e-5)


class TestGelu:
    def test_values(self):
        from scipy.special import erf
        x = np.linspace(-4, 4, 33)
        out = T.gelu(Tensor(x))
        expected = x * 0.5 * (1 + erf(x / np.sqrt(2)))
        np.testing.assert_allclose(out.data, expected, rtol=1e-4, atol=1e-6)

    def test_fixed_points(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0
        np.testing.assert_allclose(T.gelu(Tensor([10.0])).data[0], 10.0,
                                   rtol=1e-6)


# -- backward ----------------------------------------------------------------


class TestBackward:
    def test_sum_gives_ones(self):
        p = T.parameter(rng.normal(size=(3, 4)))
        T.backward(T.tsum(p))
        np.testing.assert_array_equal(p.grad, np.ones((3, 4)))

    def test_quadratic(self):
        p = T.parameter(np.array([1.0, 2.0]))
        T.backward(T.mul(T.tsum(T.mul(p, p)), 0.5))
        np.testing.assert_allclose(p.grad, [1.0, 2.0], rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        p = T.parameter(np.ones(3))
        with pytest.raises(ValueError):
            T.backward(T.mul(p, 2.0))

    def test_detach_blocks_gradient(self):
        p = T.parameter(np.array([1.0, 2.0]))
        T.backward(T.tsum(T.mul(p.detach(), p)))
        np.testing.assert_allclose(p.grad, [1.0, 2.0])  # only the live branch

    def test_no_grad_context(self):
        p = T.parameter(np.ones(3))
        with T.no_grad():
            out = T.mul(p, 2.0)
        assert not out.requires_grad

    def test_grad_accumulates_across_uses(self):
        p = T.parameter(np.array([3.0]))
        T.backward(T.tsum(T.add(T.mul(p, 2.0), T.mul(p, 5.0))))
        np.testing.assert_allclose(p.grad, [7.0])

    def test_broadcast_gradient(self):
        a = T.parameter(np.ones((3, 4)))
        b = T.parameter(np.ones(4))
        T.backward(T.tsum(T.add(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
        np.testing.assert_array_equal(b.grad, 3 * np.ones(4))


class TestGradcheck:
    """Finite-difference oracle for every differentiable primitive."""

    def test_elementwise(self):
        x = rng.normal(size=(3, 4))
        y = rng.normal(size=(3, 4))
        gradcheck(lambda a, b: T.add(a, b), [x, y])
        gradcheck(lambda a, b: T.sub(a, b), [x, y])
        gradcheck(lambda a, b: T.mul(a, b), [x, y])
        gradcheck(lambda a, b: T.div(a, b), [x, np.abs(y) + 1.0])
        gradcheck(lambda a: T.neg(a), [x])
        gradcheck(lambda a: T.exp(a), [x])
        gradcheck(lambda a: T.log(a), [np.abs(x) + 0.5])
        gradcheck(lambda a: T.sqrt(a), [np.abs(x) + 0.5])
        gradcheck(lambda a: T.tanh(a), [x])
        gradcheck(lambda a: T.erf(a), [x])
        gradcheck(lambda a: T.gelu(a), [x])
        gradcheck(lambda a: T.power(a, 3.0), [x])

    def test_reductions_and_views(self):
        x = rng.normal(size=(3, 4))
        gradcheck(lambda a: T.tsum(a, axis=0), [x])
        gradcheck(lambda a: T.tmean(a, axis=-1, keepdims=True), [x])
        gradcheck(lambda a: T.reshape(a, (4, 3)), [x])
        gradcheck(lambda a: T.transpose(a), [x])
        gradcheck(lambda a: T.swapaxes(a, 0, 1), [x])
        gradcheck(lambda a: T.broadcast_to(a, (5, 3, 4)), [x])
        gradcheck(lambda a: T.getitem(a, (slice(1, 3), slice(None))), [x])
        gradcheck(lambda a, b: T.concat([a, b], axis=1), [x, rng.normal(size=(3, 2))])

    def test_matmul_softmax_layernorm(self):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        gradcheck(lambda p, q: T.matmul(p, q), [a, b])
        gradcheck(lambda p: T.softmax(p), [a])
        gradcheck(lambda p: T.log_softmax(p), [a])
        gradcheck(lambda x, g, c: T.layer_norm(x, g, c),
                  [a, rng.normal(size=4), rng.normal(size=4)])

    def test_broadcast_mul(self):
        gradcheck(lambda p, q: T.mul(p, q),
                  [rng.normal(size=(3, 4)), rng.normal(size=(4,))])


# -- finiteness and dtype modes ----------------------------------------------


class TestFiniteness:
    def test_overflow_raises(self):
        with pytest.raises(NonFiniteError):
            T.exp(Tensor([1000.0], dtype=np.float64))

    def test_division_by_zero_raises(self):
        with pytest.raises(NonFiniteError):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_log_of_zero_raises(self):
        with pytest.raises(NonFiniteError):
            T.log(Tensor([0.0]))


class TestDtypeModes:
    def test_default_is_f32(self):
        assert Tensor([1.0]).data.dtype == np.float32

    def test_f64_mode(self):
        with T.dtype_mode(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_rejects_other_dtypes(self):
        with pytest.raises(ValueError):
            T.set_default_dtype(np.int32)


class TestHousekeeping:
    def test_zero_grads_and_gradient_set(self):
        params = {"a": T.parameter(np.ones(2)), "b": T.parameter(np.ones(3))}
        T.backward(T.add(T.tsum(params["a"]), T.tsum(params["b"])))
        grads = T.gradient_set(params)
        assert set(grads) == {"a", "b"}
        np.testing.assert_array_equal(grads["a"], np.ones(2))
        T.zero_grads(params)
        assert params["a"].grad is None

    def test_interior_grads_cleared_after_backward(self):
        p = T.parameter(np.ones(3))
        mid = T.mul(p, 2.0)
        T.backward(T.tsum(mid))
        assert mid.grad is None  # interior buffers are released
        assert p.grad is not None
