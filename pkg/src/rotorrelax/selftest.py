"""Fast invariant checks behind ``rotorrelax selftest``."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import i0e, i1e

from .averaging import drift_function, measure_order, noise_function
from .dynamics import ModelParams, State, apply_generator, exp_hamiltonian_observable, hamiltonian_observable
from .gibbs import GibbsMeasure, check_nonintegrability, mean_and_stderr, sample, stationarity_check
from .lyapunov import LyapunovParams
from .relaxation import escape_time, fit_stretched_rate


def _random_states(rng, n: int, scale: float = 5.0) -> State:
    q = rng.uniform(0, 2 * np.pi, (2, n))
    p = rng.normal(0, scale, (2, n))
    return State(q[0], q[1], p[0], p[1])


def check_generator(params: ModelParams, lyap: LyapunovParams, seed: int):
    x = _random_states(np.random.default_rng(seed), 1000)
    g, T = params.gamma, params.temperature
    LH = apply_generator(params, hamiltonian_observable(params), x)
    ref = g * (T - x.p1**2)
    e1 = float(np.max(np.abs(LH - ref) / np.maximum(np.abs(ref), 1e-300)))
    bm = lyap.beta_minus
    f = exp_hamiltonian_observable(params, bm)
    LE = apply_generator(params, f, x)
    refE = ((bm * T - 1) * x.p1**2 + T) * g * bm * f.value(x)
    e2 = float(np.max(np.abs(LE - refE) / np.maximum(np.abs(refE), 1e-300)))
    return e1 <= 1e-10 and e2 <= 1e-8, f"rel err L H {e1:.2e}, L exp(bH) {e2:.2e}"


def check_orders(params: ModelParams, lyap: LyapunovParams, seed: int):
    P = tuple(2.0**k for k in range(4, 11))
    rays = (0.0, 0.3, -0.3, 0.6 / (1 + lyap.delta), -0.6 / (1 + lyap.delta))
    worst_bar = max(measure_order(params, drift_function(params, "bar"), lam, P, 64, seed).exponent for lam in rays)
    worst_noise = max(measure_order(params, noise_function(params, "bar"), lam, P, 64, seed).exponent for lam in rays)
    e0 = measure_order(params, drift_function(params, 0), 0.3, P, 64, seed).exponent
    ok = abs(e0) <= 0.2 and worst_bar <= -2.7 and worst_noise <= -1.7
    return ok, f"p2 {e0:.2f}, p2_bar drift max {worst_bar:.2f}, p2_bar noise max {worst_noise:.2f}"


def check_gibbs(params: ModelParams, lyap: LyapunovParams, seed: int):
    measure = GibbsMeasure(params)
    x = sample(measure, seed, 50_000)
    m, se = mean_and_stderr(np.cos(x.s))
    ref = measure.angle_expectation(np.cos)
    p1m, p1se = mean_and_stderr(x.p1**2)
    stat = stationarity_check(measure, seed + 1, 50_000)
    ok = abs(m - ref) <= 3 * se and abs(p1m - params.temperature) <= 3 * p1se
    ok &= all(abs(mu) <= 3 * s for mu, s in stat.values())
    detail = f"E cos s {m:.4f}±{se:.4f} vs {ref:.4f}; E p1^2 {p1m:.4f}±{p1se:.4f}"
    pot = params.potential
    if pot.cosine_coeffs == (-1.0,) and not any(pot.sine_coeffs):
        bessel = i1e(1 / params.temperature) / i0e(1 / params.temperature)
        ok &= abs(ref - bessel) < 1e-10
        detail += f"; Bessel ratio {bessel:.6f}"
    return ok, detail


def check_divergence(params: ModelParams, lyap: LyapunovParams, seed: int):
    measure = GibbsMeasure(params)
    thr = lyap.divergence_threshold
    below = check_nonintegrability(measure, lyap, thr / 2)
    above = check_nonintegrability(measure, lyap, min(1.0, thr + 0.4))
    return below.divergent and not above.divergent, f"eps {thr / 2:.3g} divergent={below.divergent}, eps {min(1.0, thr + 0.4):.3g} divergent={above.divergent}"


def check_rate_fit(params: ModelParams, lyap: LyapunovParams, seed: int):
    rng = np.random.default_rng(seed)
    t = np.geomspace(1, 100, 20)
    fit = fit_stretched_rate(t, np.exp(-2 * np.sqrt(t)) * (1 + 0.01 * rng.standard_normal(t.size)))
    fexp = fit_stretched_rate(t, np.exp(-t / 10) * (1 + 0.01 * rng.standard_normal(t.size)))
    ok = abs(fit.alpha - 0.5) <= 0.05 and abs(fit.c - 2) <= 0.1 and abs(fexp.alpha - 1) <= 0.1
    return ok, f"stretched alpha {fit.alpha:.3f} c {fit.c:.3f}; exponential alpha {fexp.alpha:.3f}"


def check_escape(params: ModelParams, lyap: LyapunovParams, seed: int):
    at_floor = escape_time(params, 3.0, 3.0, 4, seed)
    closed = ModelParams(gamma=0.0, temperature=params.temperature, potential=params.potential.zero())
    stuck = escape_time(closed, 10.0, 3.0, 2, seed, dt=0.01, max_steps=1000)
    ok = at_floor.mean_tau == 0 and stuck.censored_frac == 1.0
    return ok, f"tau(P=floor)={at_floor.mean_tau}, censored without bath={stuck.censored_frac}"


CHECKS: dict[str, Callable] = {
    "generator_identity": check_generator,
    "order_chain": check_orders,
    "gibbs_sampler": check_gibbs,
    "nonintegrability": check_divergence,
    "rate_fit": check_rate_fit,
    "escape_edge_cases": check_escape,
}


def run_selftest(cfg) -> list[tuple[str, bool, str]]:
    params, lyap = cfg.model_params(), cfg.lyapunov_params()
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(params, lyap, cfg.run.seed)
        except (ArithmeticError, ValueError) as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
