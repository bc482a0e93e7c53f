import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import i0, i1

from rotorrelax.dynamics import ModelParams
from rotorrelax.gibbs import (
    GibbsMeasure,
    check_nonintegrability,
    logF_quantiles,
    mean_and_stderr,
    sample,
    stationarity_check,
    tail_F,
    tail_F_plain,
    truncated_moment_full,
)
from rotorrelax.lyapunov import LyapunovParams
from rotorrelax.potential import PeriodicPotential


@pytest.fixture(scope="module")
def measure():
    return GibbsMeasure(ModelParams())


def test_angular_normalisation_is_bessel(measure):
    assert measure.Z_angle == pytest.approx(2 * np.pi * i0(1.0), rel=1e-10)
    assert measure.angle_expectation(np.cos) == pytest.approx(i1(1.0) / i0(1.0), rel=1e-12)


def test_log_Z_by_direct_quadrature(rich_params):
    m = GibbsMeasure(rich_params)
    T = rich_params.temperature
    ang, _ = integrate.quad(lambda s: np.exp(-rich_params.potential.W(s) / T), 0, 2 * np.pi, limit=200)
    assert m.log_Z == pytest.approx(np.log(2 * np.pi * ang * 2 * np.pi * T), rel=1e-9)


def test_angle_sampler_matches_cdf(rich_params):
    m = GibbsMeasure(rich_params)
    s = m.sample_angles(np.random.default_rng(0), 20000)

    grid = np.linspace(0, 2 * np.pi, 20001)
    table = integrate.cumulative_simpson(m.angle_density(grid), x=grid, initial=0.0)
    assert table[-1] == pytest.approx(1.0, rel=1e-10)
    assert stats.kstest(s, lambda v: np.interp(v, grid, table)).pvalue > 1e-3


@pytest.mark.parametrize(
    "fn, exact",
    [
        (lambda x: np.cos(x.s), i1(1.0) / i0(1.0)),
        (lambda x: np.cos(2 * x.s), None),
        (lambda x: x.p1**2, 1.0),
        (lambda x: x.p2**4, 3.0),
    ],
)
def test_sampler_moments(measure, fn, exact):
    x = sample(measure, 7, 100_000)
    m, se = mean_and_stderr(fn(x))
    if exact is None:
        exact = measure.angle_expectation(lambda s: np.cos(2 * s))
    assert abs(m - exact) <= 3 * se


def test_uncoupled_measure_is_uniform_in_angles():
    m = GibbsMeasure(ModelParams(potential=PeriodicPotential.zero()))
    x = sample(m, 1, 20000)
    assert stats.kstest(x.s / (2 * np.pi), "uniform").pvalue > 1e-3
    assert abs(np.corrcoef(x.q1, x.s)[0, 1]) < 0.03


def test_sampling_is_deterministic(measure):
    np.testing.assert_array_equal(sample(measure, 3, 100).as_array(), sample(measure, 3, 100).as_array())


def test_stationarity(rich_params):
    res = stationarity_check(GibbsMeasure(rich_params), 2, 100_000)
    assert set(res) == {"p1^2", "p2^2", "cos(s)", "H"}
    for m, se in res.values():
        assert abs(m) <= 3 * se


def test_tail_at_one_is_certain(measure, lyap):
    assert tail_F(measure, lyap, 1.0).prob == 1.0
    with pytest.raises(ValueError):
        tail_F(measure, lyap, 0.5)


@pytest.mark.parametrize("log_w", [0.5, 1.0, 3.0, 6.0, 100.0])
def test_tail_agrees_with_plain_monte_carlo(measure, lyap, log_w):
    a = tail_F(measure, lyap, log_w=log_w, n=60_000, seed=1)
    b = tail_F_plain(measure, lyap, log_w, n=100_000, seed=2)
    assert abs(a.prob - b.prob) <= 3 * np.hypot(a.stderr, b.stderr)


def test_tail_is_monotone(measure, lyap):
    lw = [0.2, 1, 2, 5, 1e7, 1e8, 1e9]
    lp = [tail_F(measure, lyap, log_w=v, n=20_000, seed=0).log_prob for v in lw]
    assert np.all(np.diff(lp) <= 0)


def test_tail_laplace_asymptotics(measure, lyap):
    # beyond the small-momentum region, pi(F > w) ~ P(|p2| > sqrt(2 log w / beta_plus))
    for log_w in (1e7, 1e9):
        est = tail_F(measure, lyap, log_w=log_w, n=20_000, seed=4)
        laplace = np.log(2) + stats.norm.logsf(np.sqrt(2 * log_w / lyap.beta_plus))
        assert abs(est.log_prob - laplace) < 1.0
        assert est.log_prob / log_w == pytest.approx(-1 / (lyap.temperature * lyap.beta_plus), rel=1e-6)
        assert not est.flagged


def test_logF_quantiles_increase(measure, lyap):
    q = logF_quantiles(measure, lyap, [0.5, 0.9, 0.99], n=50_000)
    assert np.all(np.diff(q) > 0) and q[0] > 0


def test_divergent_below_threshold(measure, lyap):
    rep = check_nonintegrability(measure, lyap, 0.05)
    assert rep.divergent
    assert rep.growth_rate == pytest.approx(rep.expected_rate, abs=0.01)
    assert np.all(np.diff(rep.log_integral) >= 0)


@pytest.mark.parametrize("eps", [0.3, 0.5])
def test_plateau_above_threshold(measure, lyap, eps):
    assert not check_nonintegrability(measure, lyap, eps).divergent


def test_full_moment_at_eps_one_is_total_mass(measure, lyap):
    # returns the log of the truncated moment
    assert truncated_moment_full(measure, lyap, 1.0, 12.0) == pytest.approx(0.0, abs=1e-6)


def test_nonintegrability_argument_checks(measure, lyap):
    with pytest.raises(ValueError):
        check_nonintegrability(measure, lyap, 0.0)
    with pytest.raises(ValueError):
        check_nonintegrability(measure, lyap, 0.1, R_grid=(4, 2, 8))
