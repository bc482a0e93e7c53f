import numpy as np
import pytest

from conftest import random_states
from rotorrelax.averaging import (
    DEFAULT_P_GRID,
    LEVELS,
    AveragedMomenta,
    DegenerateDenominatorError,
    FitError,
    corrected_momentum,
    corrected_momentum_derivatives,
    drift,
    drift_function,
    measure_order,
    noise_coefficient,
    noise_function,
    order_chain,
)
from rotorrelax.dynamics import ModelParams, Observable, State, apply_generator
from rotorrelax.potential import PeriodicPotential

RAYS = (0.0, 0.3, -0.3, 0.4, -0.4)  # 0.4 = 0.6 / (1 + delta) at delta = 0.5


def _states_away_from_diagonal(seed, n=200):
    x = random_states(np.random.default_rng(seed), n, scale=4.0)
    a = x.as_array()
    a[:, 3] = np.where(np.abs(a[:, 3] - a[:, 2]) < 1.0, a[:, 2] + 3.0, a[:, 3])
    return State.from_array(a)


@pytest.mark.parametrize("level", LEVELS)
def test_derivatives_match_finite_differences(rich_params, level):
    x = _states_away_from_diagonal(0)
    val, grad, h11 = corrected_momentum_derivatives(rich_params, x, level)
    fd = Observable.from_function(lambda z: corrected_momentum(rich_params, z, level), h=1e-5)
    np.testing.assert_allclose(val, corrected_momentum(rich_params, x, level))
    for g_an, g_fd in zip(grad, fd.gradient(x)):
        np.testing.assert_allclose(g_an, g_fd, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(h11, Observable.from_function(lambda z: corrected_momentum(rich_params, z, level), h=1e-3).p1_second_derivative(x), rtol=1e-4, atol=1e-6)


@pytest.mark.parametrize("level", LEVELS)
def test_drift_matches_generator_of_finite_difference_observable(rich_params, level):
    x = _states_away_from_diagonal(1)
    fd = Observable.from_function(lambda z: corrected_momentum(rich_params, z, level), h=1e-4)
    np.testing.assert_allclose(drift(rich_params, x, level), apply_generator(rich_params, fd, x), rtol=1e-4, atol=1e-5)


def test_bare_momentum_drift_is_minus_force(rich_params):
    x = _states_away_from_diagonal(2)
    np.testing.assert_allclose(drift(rich_params, x, 0), -rich_params.potential.w(x.s), atol=1e-14)
    np.testing.assert_allclose(noise_coefficient(rich_params, x, 0), 0.0)


def test_first_correction_closed_form(params):
    # L(p2 + W/D) = (W w - gamma p1 W ... ) collected by hand for W = -cos
    x = _states_away_from_diagonal(3)
    g, T = params.gamma, params.temperature
    d = x.p2 - x.p1
    W, w = -np.cos(x.s), np.sin(x.s)
    # d/dp1 (W/D) = W/D^2, d2/dp1^2 = 2W/D^3, d/dp2 = -W/D^2, w (dp1 - dp2) acts with 2W/D^2
    expected = 2 * w * W / d**2 - g * x.p1 * W / d**2 + g * T * 2 * W / d**3
    np.testing.assert_allclose(drift(params, x, 1), expected, rtol=1e-10, atol=1e-13)


def test_corrections_vanish_without_coupling():
    params = ModelParams(potential=PeriodicPotential.zero())
    x = _states_away_from_diagonal(4)
    for level in LEVELS:
        np.testing.assert_array_equal(corrected_momentum(params, x, level), x.p2)
        np.testing.assert_allclose(drift(params, x, level), 0.0, atol=0)


def test_averaged_momenta_container(params):
    x = State(0.0, 1.0, 0.5, 20.0)
    m = AveragedMomenta.at(params, x)
    assert m.p2_bar == corrected_momentum(params, x, "bar")
    assert abs(m.p2_1 - 20.0) < 0.1


def test_degenerate_denominator_raises(params):
    with pytest.raises(DegenerateDenominatorError):
        corrected_momentum(params, State(0.0, 1.0, 2.0, 2.0), 1)
    # level 0 is defined everywhere
    assert corrected_momentum(params, State(0.0, 1.0, 2.0, 2.0), 0) == 2.0


def test_unknown_level(params):
    with pytest.raises(ValueError):
        corrected_momentum(params, State(0, 1, 0, 5), 3)


@pytest.mark.parametrize("power", [0.0, -1.0, -2.5, 1.0])
def test_measure_order_recovers_monomials(power):
    est = measure_order(ModelParams(), lambda x: (1.5 + np.cos(x.s)) * np.abs(x.p2) ** power, 0.2)
    assert abs(est.exponent - power) < 1e-6
    assert est.residual < 1e-6
    assert est.reliable()


def test_measure_order_refusals():
    with pytest.raises(FitError):
        measure_order(ModelParams(), lambda x: 0 * x.p2, 0.0)
    with pytest.raises(FitError):
        measure_order(ModelParams(), lambda x: x.p2, 0.0, P_values=(1, 2, 3))
    with pytest.raises(ValueError):
        measure_order(ModelParams(), lambda x: x.p2, 0.9, delta=0.5)


def test_order_chain_default_parameters(params):
    res = order_chain(params, RAYS, DEFAULT_P_GRID, n_angles=128)
    for lam in RAYS:
        assert abs(res[("drift", 0, lam)].exponent) <= 0.2
        assert res[("drift", 1, lam)].exponent <= -1 + 0.3
        assert res[("drift", 2, lam)].exponent <= -2 + 0.3
        assert res[("drift", "bar", lam)].exponent <= -3 + 0.3
        assert res[("noise", "bar", lam)].exponent <= -2 + 0.3


def test_order_chain_with_harmonics(rich_params):
    for lam in (0.0, 0.3):
        assert measure_order(rich_params, drift_function(rich_params, "bar"), lam, n_angles=128).exponent <= -2.7
        assert measure_order(rich_params, noise_function(rich_params, "bar"), lam, n_angles=128).exponent <= -1.7
