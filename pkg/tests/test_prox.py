import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compfl.errors import InvalidArgumentError, UnsupportedRegularizerError
from compfl.prox import Regularizer, prox, prox_objective_residual, subgradient_bound

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
steps = st.floats(1e-3, 10.0)
strengths = st.floats(0.0, 5.0)


def regularizers(d):
    lo = arrays(float, d, elements=st.floats(-3, 0))
    return st.one_of(
        st.just(Regularizer.zero()),
        strengths.map(Regularizer.l1),
        lo.map(lambda a: Regularizer.box(a, a + 1.5)),
    )


def test_zero_is_identity():
    np.testing.assert_array_equal(prox(Regularizer.zero(), 1.0, [3.0, -2.0]), [3.0, -2.0])


def test_l1_soft_threshold_examples():
    np.testing.assert_allclose(prox(Regularizer.l1(0.5), 1.0, [1.2, -0.3]), [0.7, 0.0], atol=1e-15)
    np.testing.assert_allclose(prox(Regularizer.l1(0.1), 2.0, [0.05, 0.5, -1.0]), [0.0, 0.3, -0.8], atol=1e-15)


def test_box_clamps():
    reg = Regularizer.box([-1, 0], [1, 2])
    np.testing.assert_array_equal(prox(reg, 3.0, [5.0, -4.0]), [1.0, 0.0])


@pytest.mark.parametrize("theta", [0.0, -1.0, np.inf, np.nan])
def test_bad_step_rejected(theta):
    with pytest.raises(InvalidArgumentError):
        prox(Regularizer.l1(1.0), theta, [1.0])


def test_nonfinite_input_rejected():
    with pytest.raises(InvalidArgumentError):
        prox(Regularizer.zero(), 1.0, [1.0, np.nan])


def test_regularizer_validation():
    with pytest.raises(InvalidArgumentError):
        Regularizer.l1(-0.1)
    with pytest.raises(InvalidArgumentError):
        Regularizer.box([1.0], [0.0])
    with pytest.raises(InvalidArgumentError):
        Regularizer("nuclear")


@pytest.mark.parametrize("reg", [Regularizer.zero(), Regularizer.l1(0.25), Regularizer.box([-1, -2], [1, 0])])
def test_dict_round_trip(reg):
    again = Regularizer.from_dict(reg.to_dict())
    w = np.array([3.0, -3.0])
    np.testing.assert_array_equal(prox(again, 0.7, w), prox(reg, 0.7, w))


def test_value():
    assert Regularizer.l1(0.5).value([1.0, -2.0]) == 1.5
    assert Regularizer.box([0], [1]).value([2.0]) == np.inf
    assert Regularizer.box([0], [1]).value([0.5]) == 0.0


def test_subgradient_bound_examples():
    assert subgradient_bound(Regularizer.zero(), 20) == 0.0
    assert subgradient_bound(Regularizer.l1(0.003), 20) == pytest.approx(0.013416, abs=1e-6)
    assert subgradient_bound(Regularizer.l1(1.0), 1) == 1.0
    with pytest.raises(UnsupportedRegularizerError):
        subgradient_bound(Regularizer.box([0], [1]), 1)


def test_residual_examples():
    assert prox_objective_residual(Regularizer.l1(0.5), 1.0, 1.2, 0.7) == pytest.approx(0.0, abs=1e-15)
    assert prox_objective_residual(Regularizer.zero(), 1.0, 0.0, 1.0) == 0.5


def test_residual_matches_grid_search():
    # brute-force 1-D minimisation of theta*g(u) + 0.5 (w-u)^2 over u in [-2, 2]
    reg, theta, w = Regularizer.l1(0.5), 1.0, 1.2
    grid = np.linspace(-2, 2, 40001)
    objective = theta * 0.5 * np.abs(grid) + 0.5 * (w - grid) ** 2
    gap = theta * 0.5 * abs(w) - objective.min()
    assert prox_objective_residual(reg, theta, w, w) == pytest.approx(gap, abs=1e-12)


def _prox_obj(reg, theta, w, u):
    # u is (k, d); vectorised version of theta*g(u) + 0.5 ||w - u||^2
    if reg.kind == "l1":
        gval = reg.strength * np.abs(u).sum(axis=-1)
    elif reg.kind == "zero":
        gval = 0.0
    else:
        inside = np.all((u >= reg.lo) & (u <= reg.hi), axis=-1)
        gval = np.where(inside, 0.0, np.inf)
    return theta * gval + 0.5 * np.sum((w - u) ** 2, axis=-1)


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("kind", ["zero", "l1", "box"])
def test_prox_beats_every_grid_point(d, kind):
    rng = np.random.default_rng(7)
    reg = {"zero": Regularizer.zero(), "l1": Regularizer.l1(0.3),
           "box": Regularizer.box(-0.5 * np.ones(d), 0.8 * np.ones(d))}[kind]
    axis = np.arange(-2, 2 + 1e-9, 1e-4 if d == 1 else 1e-2)
    grid = axis[:, None] if d == 1 else np.stack(np.meshgrid(axis, axis), -1).reshape(-1, 2)
    for _ in range(5):
        w, theta = rng.uniform(-1.8, 1.8, d), rng.uniform(0.2, 3.0)
        p = prox(reg, theta, w)
        best = _prox_obj(reg, theta, w, grid).min()
        assert _prox_obj(reg, theta, w, p[None])[0] <= best + 1e-12
        assert prox_objective_residual(reg, theta, w, p) <= 1e-12


@given(st.data(), steps)
def test_nonexpansive(data, theta):
    d = 4
    reg = data.draw(regularizers(d))
    a = data.draw(arrays(float, d, elements=finite))
    b = data.draw(arrays(float, d, elements=finite))
    pa, pb = prox(reg, theta, a), prox(reg, theta, b)
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12


@given(steps, strengths)
def test_zero_is_fixed_point_of_l1(theta, s):
    np.testing.assert_array_equal(prox(Regularizer.l1(s), theta, np.zeros(3)), np.zeros(3))


@given(arrays(float, (3, 4), elements=finite), steps, strengths)
def test_block_prox_is_rowwise(W, theta, s):
    reg = Regularizer.l1(s)
    stacked = prox(reg, theta, W)
    for i in range(3):
        np.testing.assert_array_equal(stacked[i], prox(reg, theta, W[i]))


@given(arrays(float, 5, elements=finite), steps, st.floats(0.01, 5.0))
def test_l1_optimality_condition(w, theta, s):
    # (w - p)/theta must be a subgradient of s*|.|_1 at p
    p = prox(Regularizer.l1(s), theta, w)
    v = (w - p) / theta
    on = p != 0
    np.testing.assert_allclose(v[on], s * np.sign(p[on]), atol=1e-9 * (1 + np.abs(w[on]).max(initial=0)) / theta)
    assert np.all(np.abs(v[~on]) <= s * (1 + 1e-12))
