import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medivista.config import ModelConfig
from medivista.fact import FacTFactors, count_parameters, fact_apply, fact_delta, init_fact, trainable_fraction
from medivista.model import MediViSTA
from medivista.tensor import Tensor
from oracles import triple_sum


def random_factors(rng, d, r, depth=2):
    f = init_fact(d, r, depth, rng)
    for t in f.sigmas.values():
        t.data[:] = rng.normal(size=t.shape)
    return f


def test_rank_one_hand_example():
    f = FacTFactors(u=Tensor(np.array([[1.0], [2.0]])), v=Tensor(np.array([[3.0], [4.0]])),
                    sigmas={(0, "query"): Tensor(np.array([[0.5]]))})
    np.testing.assert_allclose(fact_delta(f, 0, "query").data, [[1.5, 2.0], [3.0, 4.0]])


def test_zero_core_zero_delta(rng):
    f = init_fact(6, 2, 1, rng)
    np.testing.assert_array_equal(fact_delta(f, 0, "value").data, 0.0)


def test_missing_core(rng):
    with pytest.raises(KeyError, match="layer 5"):
        fact_delta(init_fact(4, 2, 2, rng), 5, "query")


def test_triple_sum_oracle_d8_r3(rng):
    f = random_factors(rng, 8, 3)
    ref = triple_sum(f.u.data, f.sigmas[(1, "value")].data, f.v.data)
    assert np.max(np.abs(fact_delta(f, 1, "value").data - ref)) < 1e-12


@given(st.integers(0, 2**31 - 1), st.integers(1, 16), st.data())
def test_triple_sum_oracle_property(seed, d, data):
    r = data.draw(st.integers(1, d))
    f = random_factors(np.random.default_rng(seed), d, r, depth=1)
    ref = triple_sum(f.u.data, f.sigmas[(0, "query")].data, f.v.data)
    assert np.max(np.abs(fact_delta(f, 0, "query").data - ref)) < 1e-12


def test_apply_zero_core_returns_w0(rng):
    w0 = Tensor(rng.normal(size=(6, 6)))
    np.testing.assert_array_equal(fact_apply(w0, init_fact(6, 2, 1, rng), 0, "query").data, w0.data)


def test_apply_zero_w0_returns_delta(rng):
    f = random_factors(rng, 5, 2)
    np.testing.assert_array_equal(fact_apply(Tensor(np.zeros((5, 5))), f, 0, "query").data,
                                  fact_delta(f, 0, "query").data)


def test_apply_matches_oracle_and_keeps_w0(rng):
    f = random_factors(rng, 8, 3)
    w0 = Tensor(rng.normal(size=(8, 8)))
    before = w0.data.copy()
    out = fact_apply(w0, f, 0, "query").data
    ref = before + triple_sum(f.u.data, f.sigmas[(0, "query")].data, f.v.data)
    assert np.max(np.abs(out - ref)) < 1e-12
    np.testing.assert_array_equal(w0.data, before)


@pytest.mark.parametrize("shape", [(8, 6), (6, 6)])
def test_apply_dimension_errors(rng, shape):
    with pytest.raises(ValueError):
        fact_apply(Tensor(np.zeros(shape)), init_fact(8, 2, 1, rng), 0, "query")


def test_gradients_reach_factors_not_w0(rng):
    f = random_factors(rng, 6, 2)
    w0 = Tensor(rng.normal(size=(6, 6)), requires_grad=False)
    fact_apply(w0, f, 0, "query").sum().backward()
    assert w0.grad is None
    assert f.u.grad is not None and f.v.grad is not None and f.sigmas[(0, "query")].grad is not None
    assert f.sigmas[(1, "query")].grad is None


def test_init_is_shared_with_zero_cores(rng):
    f = init_fact(32, 4, 4, rng)
    assert f.shared and len(f.sigmas) == 8
    assert all(np.all(s.data == 0) for s in f.sigmas.values())
    assert abs(f.u.data.std() - 1 / np.sqrt(32)) < 0.05


def test_split_factors(rng):
    f = init_fact(8, 2, 1, rng, shared=False)
    assert not f.shared
    assert f.factors_for("query")[0] is not f.factors_for("value")[0]
    assert set(f.tensors()) == {"fact.u.query", "fact.v.query", "fact.u.value", "fact.v.value",
                                "fact.sigma.0.query", "fact.sigma.0.value"}


def test_rank_above_dim_rejected(rng):
    with pytest.raises(ValueError):
        init_fact(4, 5, 1, rng)


def test_validate_reports_missing_cores(rng):
    f = init_fact(4, 2, 1, rng)
    with pytest.raises(ValueError, match="missing"):
        f.validate(depth=2)


# ---- trainable fraction ----


def test_fraction_extremes():
    m = MediViSTA(ModelConfig())
    m.set_trainable([])
    assert trainable_fraction(m) == 0.0
    m.unfreeze_all()
    assert trainable_fraction(m) == 1.0


def test_toy_fraction_regression():
    m = MediViSTA(ModelConfig())
    m.freeze_backbone()
    assert count_parameters(m.parameters()) == 70635
    assert count_parameters(m.parameters(), trainable_only=True) == 16203
    assert trainable_fraction(m) == pytest.approx(16203 / 70635, abs=1e-15)
    assert trainable_fraction(m) < 0.25


def test_fraction_decreases_with_depth():
    fracs = []
    for depth in (4, 8, 12, 16):
        m = MediViSTA(ModelConfig(depth=depth))
        m.freeze_backbone()
        fracs.append(trainable_fraction(m))
    assert all(a > b for a, b in zip(fracs, fracs[1:]))
