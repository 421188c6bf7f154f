import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from affuse import tensor as T
from conftest import fd_grad, leaf, rel_err


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            c[i, j] = s
    return c


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((3, 3))
        assert np.array_equal((T.Tensor(np.eye(3)) @ T.Tensor(m)).data, m)

    def test_scalar(self):
        assert (T.Tensor([[2.0]]) @ T.Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_against_triple_loop(self, rng):
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 2))
        np.testing.assert_allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("seed", range(5))
    def test_associativity(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = (T.Tensor(r.standard_normal(s)) for s in ((3, 4), (4, 5), (5, 2)))
        np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, atol=1e-9)


class TestSoftmax:
    def test_zero_row_uniform(self):
        np.testing.assert_allclose(T.softmax_rows(T.Tensor(np.zeros((1, 3)))).data, [[1 / 3] * 3], atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = T.softmax_rows(T.Tensor([[1000.0, 0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-300)
        assert np.isfinite(out).all()

    def test_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(T.softmax_rows(T.Tensor(x[None])).data[0], expected, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)))
    def test_rows_positive_and_normalized(self, x):
        out = T.softmax_rows(T.Tensor(x)).data
        assert (out > 0).all()
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestReductions:
    def test_mean(self):
        assert T.mean(T.Tensor([1.0, 2.0, 3.0])).item() == 2.0

    def test_biased_variance(self):
        assert T.variance(T.Tensor([1.0, 2.0, 3.0])).item() == pytest.approx(2 / 3, abs=1e-15)

    def test_concat_widths(self, rng):
        a, b = T.Tensor(rng.standard_normal((128, 7))), T.Tensor(rng.standard_normal((96, 7)))
        assert T.concat([a, b], axis=0).shape == (224, 7)

    def test_concat_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.concat([T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 4)))], axis=0)

    def test_add_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf([1.0, -2.0, 5.0])
        T.backward(T.tsum(x))
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_square(self):
        x = leaf(3.0)
        T.backward(x * x)
        assert x.grad == 6.0

    def test_non_scalar_loss(self):
        with pytest.raises(T.ShapeError):
            T.backward(leaf([1.0, 2.0]) * 2.0)

    def test_unused_leaf_gets_zero(self):
        x, y = leaf([1.0, 2.0]), leaf([3.0])
        grads = T.backward(T.tsum(x), leaves=[x, y])
        assert grads[y].tolist() == [0.0]

    def test_shared_subexpression_accumulates(self):
        x = leaf(2.0)
        y = x * x
        T.backward(y + y)
        assert x.grad == 8.0

    def test_nonfinite_rejected(self):
        with pytest.raises(T.NonFiniteError):
            T.Tensor([1.0, np.nan])
        with pytest.raises(T.NonFiniteError):
            T.div(T.Tensor(1.0), T.Tensor(0.0))

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad


def _unary_cases(rng):
    pos = rng.uniform(0.5, 2.0, (3, 4))
    gen = rng.standard_normal((3, 4))
    return {
        "add": (lambda a: T.tsum((a + T.Tensor(gen)) * T.Tensor(gen)), gen),
        "sub": (lambda a: T.tsum((T.Tensor(gen) - a) * T.Tensor(gen)), gen),
        "mul": (lambda a: T.tsum(a * a * T.Tensor(gen)), gen),
        "div": (lambda a: T.tsum(T.Tensor(gen) / a), pos),
        "sqrt": (lambda a: T.tsum(T.sqrt(a) * T.Tensor(gen)), pos),
        "exp": (lambda a: T.tsum(T.exp(a) * T.Tensor(gen)), gen),
        "relu": (lambda a: T.tsum(T.relu(a) * T.Tensor(gen)), gen),
        "mean_axis": (lambda a: T.tsum(T.square(T.mean(a, 1))), gen),
        "variance": (lambda a: T.tsum(T.variance(a, 0) * T.Tensor(gen[0])), gen),
        "softmax": (lambda a: T.tsum(T.softmax_rows(a) * T.Tensor(gen)), gen),
        "transpose": (lambda a: T.tsum(T.transpose(a, (1, 0)) * T.Tensor(gen.T)), gen),
        "reshape": (lambda a: T.tsum(T.reshape(a, (4, 3)) * T.Tensor(gen.reshape(4, 3))), gen),
        "slice": (lambda a: T.tsum(T.square(a[1:, ::2])), gen),
        "gather": (lambda a: T.tsum(T.square(T.reshape(a, (12,))[np.array([0, 5, 5, 11])])), gen),
        "concat": (lambda a: T.tsum(T.square(T.concat([a, a * 2.0], axis=1))), gen),
        "matmul_left": (lambda a: T.tsum(T.matmul(a, T.Tensor(gen.T)) * T.Tensor(np.ones((3, 3)) + gen[:, :3])), gen),
        "matmul_right": (lambda a: T.tsum(T.square(T.matmul(T.Tensor(gen.T), a))), gen),
    }


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (fn, x0) in _unary_cases(rng).items():
        x = leaf(x0)
        T.backward(fn(x))
        num = fd_grad(lambda arr: fn(T.Tensor(arr)).item(), x0)
        assert rel_err(x.grad, num) < 1e-6, name


@pytest.mark.parametrize("seed", range(20))
def test_broadcast_gradients(seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 1))
    w = T.Tensor(rng.standard_normal((2, 3, 4)))

    def f(a, b):
        return T.tsum((a * b + b) * w)

    a, b = leaf(a0), leaf(b0)
    T.backward(f(a, b))
    assert rel_err(a.grad, fd_grad(lambda x: f(T.Tensor(x), T.Tensor(b0)).item(), a0)) < 1e-6
    assert rel_err(b.grad, fd_grad(lambda x: f(T.Tensor(a0), T.Tensor(x)).item(), b0)) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_causal_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2, 3, 9))
    w0 = rng.standard_normal((4, 3, 5))
    b0 = rng.standard_normal(4)
    g = T.Tensor(rng.standard_normal((2, 4, 9)))

    def f(x, w, b):
        return T.tsum(T.causal_conv1d(x, w, b, 2) * g)

    x, w, b = leaf(x0), leaf(w0), leaf(b0)
    T.backward(f(x, w, b))
    assert rel_err(x.grad, fd_grad(lambda a: f(T.Tensor(a), T.Tensor(w0), T.Tensor(b0)).item(), x0)) < 1e-6
    assert rel_err(w.grad, fd_grad(lambda a: f(T.Tensor(x0), T.Tensor(a), T.Tensor(b0)).item(), w0)) < 1e-6
    assert rel_err(b.grad, fd_grad(lambda a: f(T.Tensor(x0), T.Tensor(w0), T.Tensor(a)).item(), b0)) < 1e-6
