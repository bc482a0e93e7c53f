import numpy as np
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from rotorrelax import config as cfgmod
from rotorrelax.averaging import corrected_momentum, corrected_momentum_derivatives
from rotorrelax.dynamics import ModelParams, Observable, State, Trajectory, apply_generator, hamiltonian, hamiltonian_observable
from rotorrelax.lyapunov import (
    LF_over_F,
    LyapunovParams,
    classify_array,
    cutoff_rho,
    eval_logF,
    ode_comparison_bound,
    rho_derivatives,
    smoothstep,
)
from rotorrelax.potential import PeriodicPotential
from rotorrelax.relaxation import _tails

coef = st.floats(-2, 2, allow_nan=False)
angle = st.floats(0, 2 * np.pi, allow_nan=False)
mom = st.floats(-50, 50, allow_nan=False)
pots = st.builds(PeriodicPotential, st.lists(coef, min_size=1, max_size=4).map(tuple), st.lists(coef, max_size=3).map(tuple))
models = st.builds(ModelParams, st.floats(0.05, 5), st.floats(0.2, 5), pots)
states = st.builds(State, angle, angle, mom, mom)

LYAP = LyapunovParams()
DEFAULT = ModelParams()


@given(models, states)
def test_generator_of_energy_is_dissipation(params, x):
    LH = apply_generator(params, hamiltonian_observable(params), x)
    ref = params.gamma * (params.temperature - x.p1**2)
    assert abs(LH - ref) <= 1e-10 * max(1.0, abs(ref))


@given(models, states, st.sampled_from([1, 2, "bar"]))
def test_corrected_momentum_gradient(params, x, level):
    assume(abs(x.p2 - x.p1) > 2.0)
    _, grad, _ = corrected_momentum_derivatives(params, x, level)
    fd = Observable.from_function(lambda z: corrected_momentum(params, z, level), h=1e-6).gradient(x)
    for a, b in zip(grad, fd):
        assert abs(a - b) <= 1e-5 * max(1.0, abs(a))


@given(models, angle, angle, st.floats(-5, 5), st.floats(20, 1e4), st.sampled_from([-1.0, 1.0]))
def test_corrections_shrink_with_distance(params, q1, q2, p1, P, sign):
    # each counter-term is O(1/|p2 - p1|) on the fast cone
    x = State(q1, q2, p1, sign * P)
    diff = abs(corrected_momentum(params, x, "bar") - x.p2)
    assert diff <= 3 * params.potential.amplitude_bound * (1 + params.gamma**2) / (abs(x.p2) - 5) + 1e-12


@given(st.floats(-1, 2, allow_nan=False))
def test_smoothstep_range_and_monotone(u):
    v, dv, _ = smoothstep(u)
    assert 0 <= v <= 1 and dv >= 0


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_cutoff_derivatives_finite(p1, p2):
    assert np.all(np.isfinite(rho_derivatives(p1, p2, LYAP.delta, LYAP.blend_inner_radius)))


@given(mom, mom)
def test_cutoff_support_lies_in_fast_cone(p1, p2):
    rho = cutoff_rho(p1, p2, LYAP.delta, LYAP.blend_inner_radius)
    assert 0 <= rho <= 1
    if rho > 0:
        assert classify_array(p1, p2, LYAP.delta) >= 2 or np.hypot(p1, p2) < 1


@given(states)
@settings(suppress_health_check=[HealthCheck.too_slow])
def test_logF_dominates_energy_part(x):
    assume(abs(x.p2 - x.p1) > 1e-3)
    lf = eval_logF(DEFAULT, LYAP, x)
    assert lf >= np.logaddexp(0.0, LYAP.beta_minus * hamiltonian(DEFAULT, x)) - 1e-9
    r, _ = LF_over_F(DEFAULT, LYAP, State(*(np.atleast_1d(v) for v in (x.q1, x.q2, x.p1, x.p2))))
    assert np.all(np.isfinite(r))


@given(st.floats(1, 1e6), st.floats(0, 1e4), st.floats(0, 1e4))
def test_comparison_bound_ordering(F0, t1, t2):
    t1, t2 = sorted((t1, t2))
    e1, s1 = ode_comparison_bound(LYAP, F0, t1)
    e2, _ = ode_comparison_bound(LYAP, F0, t2)
    assert e1 <= s1 + 1e-9 and e1 <= e2 + 1e-12


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=50), st.lists(st.floats(0, 1e6), min_size=1, max_size=20))
def test_empirical_tails_monotone(values, grid):
    t = _tails(np.array(values), np.sort(np.array(grid)))
    assert np.all((t >= 0) & (t <= 1)) and np.all(np.diff(t) <= 0)


@given(st.lists(st.integers(1, 3000), min_size=1, max_size=6), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_advance_chunking_invariance(chunks, seed):
    a = Trajectory(DEFAULT, [0.0, 1.0, 0.5, 6.0], 0.01, seed)
    b = Trajectory(DEFAULT, [0.0, 1.0, 0.5, 6.0], 0.01, seed)
    a.advance(sum(chunks))
    for c in chunks:
        b.advance(c)
    np.testing.assert_array_equal(a.x, b.x)


@given(st.floats(0.05, 5), st.lists(coef, min_size=1, max_size=3), st.integers(0, 10**6))
def test_config_round_trip(gamma, cos, seed):
    cfg = cfgmod.from_dict({"model": {"gamma": gamma, "cosine_coeffs": cos}, "run": {"seed": seed}})
    again = cfgmod.from_dict(cfgmod.tomllib.loads(cfgmod.dumps(cfg)))
    assert again.to_dict() == cfg.to_dict()
