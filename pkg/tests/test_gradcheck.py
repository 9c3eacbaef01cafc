import numpy as np
import pytest

from medivista import ops
from medivista.gradcheck import HIDDEN_OPS, check_registered, grad_check
from medivista.tensor import GRADCHECK_REGISTRY, NonFiniteError, Tensor


def test_linear_op_exact():
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    rep = grad_check(lambda t: ops.mul(t, 2.0), [x], weights="ones")
    assert rep.passed
    np.testing.assert_allclose(x.grad, 2.0)
    assert rep.max_rel_err < 1e-9


def test_softmax_random_vector_passes(rng):
    x = Tensor(rng.normal(size=8), requires_grad=True)
    assert grad_check(lambda t: ops.softmax(t), [x], tol=1e-5).passed


def test_matmul_random_passes(rng):
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    assert grad_check(ops.matmul, [a, b], tol=1e-6).passed


def test_corrupted_backward_fails():
    (rep,) = check_registered(["corrupted_backward"])
    assert not rep.passed
    assert rep.max_rel_err == pytest.approx(0.01 / 1.01, rel=1e-3)


def test_corrupted_op_hidden_from_default_sweep():
    assert "corrupted_backward" in HIDDEN_OPS
    assert "corrupted_backward" not in GRADCHECK_REGISTRY


def test_non_finite_names_the_op():
    x = Tensor(np.array([800.0, 1.0]), requires_grad=True)
    with pytest.raises(NonFiniteError, match="expop.*exp"):
        grad_check(lambda t: ops.exp(t), [x], name="expop")


def test_unknown_op():
    with pytest.raises(KeyError):
        check_registered(["no_such_op"])


def test_every_registered_op_passes_on_ten_seeds():
    names = [n for n in GRADCHECK_REGISTRY if n != "medivista_forward"]
    reports = check_registered(names, tol=1e-5, seeds=range(10))
    bad = {r.name: r.max_rel_err for r in reports if not r.passed}
    assert not bad
