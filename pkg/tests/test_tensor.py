import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from medivista import ops
from medivista.tensor import NonFiniteError, Tensor, no_grad


def test_matmul_identity():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_zero():
    out = ops.matmul(Tensor(np.eye(2)), Tensor(np.zeros((2, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(4, 3\).*\(2, 5\)"):
        ops.matmul(Tensor(np.ones((4, 3))), Tensor(np.ones((2, 5))))


def test_matmul_backward_formulas(rng):
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    g = rng.normal(size=(4, 5))
    (ops.matmul(a, b) * g).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3), atol=1e-15)


def test_softmax_no_overflow():
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([1000.0, 0.0]))).data, [1.0, 0.0], atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    p = ops.softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_matmul_associative(seed):
    r = np.random.default_rng(seed)
    a, b, c = (Tensor(r.normal(size=s)) for s in [(3, 4), (4, 2), (2, 5)])
    left = ops.matmul(ops.matmul(a, b), c).data
    right = ops.matmul(a, ops.matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-10)


def test_non_finite_is_hard_error():
    with pytest.raises(NonFiniteError, match="exp"):
        ops.exp(Tensor(np.array([1000.0, 1.0])))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.mul(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ops.add(ops.mul(x, x), x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_grad_shape_matches_data(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    ops.sum(ops.mul(x, Tensor(rng.normal(size=(1, 3))))).backward()
    assert x.grad.shape == x.shape


def test_conv2d_against_direct_loops(rng):
    x = rng.normal(size=(1, 2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_resize_bilinear_preserves_constant():
    out = ops.resize_bilinear(Tensor(np.full((1, 1, 4, 4), 3.0)), 8, 8).data
    np.testing.assert_allclose(out, 3.0, atol=1e-14)


def test_layer_norm_zero_mean_unit_var(rng):
    x = Tensor(rng.normal(size=(4, 8)) * 5 + 2)
    y = ops.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-4)
