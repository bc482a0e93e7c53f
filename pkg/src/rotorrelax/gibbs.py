"""Exact sampling and quadrature for the Gibbs measure ``exp(-H/T) / Z``.

Momenta are independent ``N(0, T)``; the relative angle ``s = q2 - q1`` has
density proportional to ``exp(-W(s)/T)`` and ``q1`` is uniform.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy import stats
from scipy.interpolate import PchipInterpolator
from scipy.special import logsumexp

from .dynamics import ModelParams, Observable, State, apply_generator, hamiltonian_observable
from .lyapunov import LyapunovParams, classify_array, eval_logF
from .potential import TWO_PI

logger = logging.getLogger(__name__)


class QuadratureError(FloatingPointError):
    pass


class GibbsMeasure:
    def __init__(self, params: ModelParams, n_grid: int = 4096):
        self.params = params
        T = params.temperature
        self._s = np.linspace(0.0, TWO_PI, n_grid + 1)
        dens = np.exp(-params.potential.W(self._s) / T)
        cdf = cumulative_trapezoid(dens, self._s, initial=0.0)
        self.Z_angle = float(cdf[-1])
        if not self.Z_angle > 0:
            raise QuadratureError("angular normalisation vanished")
        self._inv_cdf = PchipInterpolator(cdf / cdf[-1], self._s)

    @property
    def log_Z(self) -> float:
        """Full normalisation: ``2pi`` (q1) times ``Z_angle`` times ``2 pi T`` (momenta)."""
        return float(np.log(TWO_PI) + np.log(self.Z_angle) + np.log(TWO_PI * self.params.temperature))

    def angle_density(self, s):
        return np.exp(-self.params.potential.W(s) / self.params.temperature) / self.Z_angle

    def sample_angles(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.mod(self._inv_cdf(rng.uniform(0.0, 1.0, n)), TWO_PI)

    def angle_expectation(self, fn, n_nodes: int = 256) -> float:
        """``E[fn(s)]`` by Gauss-Legendre quadrature on [0, 2pi]."""
        x, wts = np.polynomial.legendre.leggauss(n_nodes)
        s = np.pi * (x + 1)
        return float(np.pi * np.sum(wts * fn(s) * self.angle_density(s)))


def sample(measure: GibbsMeasure, seed: int, n: int) -> State:
    rng = np.random.default_rng(seed)
    sd = np.sqrt(measure.params.temperature)
    q1 = rng.uniform(0.0, TWO_PI, n)
    s = measure.sample_angles(rng, n)
    p1 = rng.normal(0.0, sd, n)
    p2 = rng.normal(0.0, sd, n)
    return State(q1, q1 + s, p1, p2)


def mean_and_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, float)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


# ---------------------------------------------------------------------------
# stationarity


def standard_observables(params: ModelParams) -> dict[str, Observable]:
    """``p1^2, p2^2, cos(q2 - q1), H`` with analytic derivatives."""

    def zeros(x):
        return np.zeros_like(np.asarray(x.p1, float))

    def ones(x):
        return np.ones_like(np.asarray(x.p1, float))

    def cos_grad(x):
        sn = np.sin(x.s)
        return (sn, -sn, zeros(x), zeros(x))

    return {
        "p1^2": Observable(lambda x: np.square(x.p1), lambda x: (zeros(x), zeros(x), 2 * x.p1, zeros(x)), lambda x: 2 * ones(x), "p1^2"),
        "p2^2": Observable(lambda x: np.square(x.p2), lambda x: (zeros(x), zeros(x), zeros(x), 2 * x.p2), zeros, "p2^2"),
        "cos(s)": Observable(lambda x: np.cos(x.s), cos_grad, zeros, "cos(s)"),
        "H": hamiltonian_observable(params),
    }


def stationarity_check(measure: GibbsMeasure, seed: int, n: int, observables: dict | None = None) -> dict:
    """``E_pi[L f]`` with standard errors; each should vanish."""
    x = sample(measure, seed, n)
    observables = observables or standard_observables(measure.params)
    return {name: mean_and_stderr(apply_generator(measure.params, f, x)) for name, f in observables.items()}


# ---------------------------------------------------------------------------
# tails of F


@dataclass
class TailEstimate:
    log_w: float
    prob: float
    stderr: float
    log_prob: float
    n: int
    flagged: bool = False
    log_stderr: float = -np.inf

    @property
    def rel_err(self) -> float:
        if self.log_prob == -np.inf:
            return np.inf
        return float(np.exp(self.log_stderr - self.log_prob))


def _p2_split(log_w: float, lyap: LyapunovParams, params: ModelParams) -> float:
    # on the fast cone {F > w} needs pbar^2 > 2 log w / beta_plus, and pbar^2 >= p2^2 - 2 max|W| - O(1/p2);
    # split a few thermal units (in p2^2) inside that level
    r2 = 2.0 * log_w / lyap.beta_plus - 2.0 * params.potential.amplitude_bound - 8.0 * params.temperature
    return float(np.sqrt(r2)) if r2 > 0 else 0.0


def _states_in_band(measure: GibbsMeasure, rng, n: int, lo: float, hi: float) -> State:
    """``n`` Gibbs states conditioned on ``lo <= |p2| < hi``, sampled exactly."""
    sd = np.sqrt(measure.params.temperature)
    p2 = stats.truncnorm.rvs(lo / sd, hi / sd, scale=sd, size=n, random_state=rng)
    p2 = p2 * rng.choice([-1.0, 1.0], n)
    p1 = rng.normal(0.0, sd, n)
    q1 = rng.uniform(0.0, TWO_PI, n)
    s = measure.sample_angles(rng, n)
    return State(q1, q1 + s, p1, p2)


def tail_F(
    measure: GibbsMeasure,
    lyap: LyapunovParams,
    w: float | None = None,
    *,
    log_w: float | None = None,
    n: int = 100_000,
    seed: int = 0,
    max_rel_err: float = 0.2,
) -> TailEstimate:
    """``pi(F > w)`` by exact stratification of the Gibbs measure in ``|p2|``.

    For large ``w`` the tail is carried by ``|p2|`` just below
    ``sqrt(2 log w / beta_plus)``; each stratum is sampled from the exact
    truncated Gaussian and weighted by its closed-form mass. A separate core
    stratum at small ``|p2|`` resolves the region near the cutoff where the
    counter-terms of ``pbar`` blow up.
    Pass ``log_w`` for thresholds beyond floating-point range.
    """
    if log_w is None:
        if w is None or not w >= 1:
            raise ValueError("threshold w must be >= 1")
        log_w = float(np.log(w))
    if log_w < 0:
        raise ValueError("threshold w must be >= 1")
    if log_w == 0:
        return TailEstimate(0.0, 1.0, 0.0, 0.0, 0)
    sd = np.sqrt(measure.params.temperature)
    rng = np.random.default_rng(seed)
    R = _p2_split(log_w, lyap, measure.params)
    # strata in |p2|: core (small momenta, where the counter-terms can be large), middle, tail
    core = min(R, 2.0 * sd)
    edges = [0.0, core, R, np.inf] if R > core else [0.0, R, np.inf]
    shares = [0.3, 0.1, 0.6] if len(edges) == 4 else [0.2, 0.8]
    if R == 0:
        edges, shares = [0.0, np.inf], [1.0]
    log_sf = np.log(2.0) + stats.norm.logsf(np.array(edges) / sd)
    counts = [int(f * n) for f in shares]
    counts[-1] += n - sum(counts)
    parts = []  # (log stratum mass, hit indicators)
    for k, m in enumerate(counts):
        # mass of [lo, hi) = sf(lo) - sf(hi), in log domain
        log_mass = float(log_sf[k] + np.log(-np.expm1(log_sf[k + 1] - log_sf[k]))) if np.isfinite(edges[k + 1]) else float(log_sf[k])
        st = _states_in_band(measure, rng, m, edges[k], edges[k + 1])
        parts.append((min(log_mass, 0.0), eval_logF(measure.params, lyap, st) > log_w))
    log_terms, log_vars = [], []
    for lw, hits in parts:
        m = hits.mean()
        if m > 0:
            log_terms.append(lw + np.log(m))
            v = hits.var(ddof=1) / hits.size
            if v > 0:
                log_vars.append(2 * lw + np.log(v))
    if not log_terms:
        logger.warning("no samples exceeded log w = %.4g; tail estimate is 0", log_w)
        return TailEstimate(log_w, 0.0, 0.0, -np.inf, n, flagged=True)
    log_p = float(logsumexp(log_terms))
    log_se = float(0.5 * logsumexp(log_vars)) if log_vars else -np.inf
    rel = float(np.exp(log_se - log_p))
    flagged = rel > max_rel_err
    if flagged:
        logger.warning("tail estimate at log w = %.4g has relative standard error %.2f", log_w, rel)
    return TailEstimate(log_w, float(np.exp(log_p)), float(np.exp(log_se)), log_p, n, flagged, log_se)


def tail_F_plain(measure: GibbsMeasure, lyap: LyapunovParams, log_w: float, n: int = 100_000, seed: int = 0) -> TailEstimate:
    """Plain Monte Carlo reference for moderate thresholds."""
    hits = eval_logF(measure.params, lyap, sample(measure, seed, n)) > log_w
    p, se = mean_and_stderr(hits.astype(float))
    with np.errstate(divide="ignore"):
        return TailEstimate(log_w, p, se, float(np.log(p)), n, log_stderr=float(np.log(se)))


def logF_quantiles(measure: GibbsMeasure, lyap: LyapunovParams, qs, n: int = 200_000, seed: int = 0) -> np.ndarray:
    """Quantiles of ``log F`` under the Gibbs measure."""
    return np.quantile(eval_logF(measure.params, lyap, sample(measure, seed, n)), qs)


# ---------------------------------------------------------------------------
# non-integrability of F^(1 - eps)


@dataclass
class DivergenceReport:
    """Truncated moments ``I(R)`` over the strip and their excess ``I(R) - I(R_0)`` (both as logs)."""

    epsilon: float
    R: np.ndarray
    log_integral: np.ndarray
    log_excess: np.ndarray  # log(I(R) - I(R_0)); -inf at R_0
    divergent: bool
    growth_rate: float  # fitted d log(excess) / d(R^2/2) over the last points
    expected_rate: float  # (1 - eps) beta_plus - 1/T

    def rows(self):
        return list(zip(self.R.tolist(), self.log_integral.tolist(), self.log_excess.tolist()))


def _gauss_panels(a: float, b: float, width: float, order: int):
    n = max(1, int(np.ceil((b - a) / width)))
    edges = np.linspace(a, b, n + 1)
    x, wts = np.polynomial.legendre.leggauss(order)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return (mid[:, None] + half[:, None] * x[None, :]).ravel(), (half[:, None] * wts[None, :]).ravel()


def _log_integrand(measure: GibbsMeasure, lyap: LyapunovParams, power: float, s, p1, p2):
    params = measure.params
    H = 0.5 * (p1**2 + p2**2) + params.potential.W(s)
    val = -H / params.temperature - measure.log_Z
    if power != 0:
        val = val + power * eval_logF(params, lyap, State(np.zeros_like(s), s, p1, p2))
    if not np.all(np.isfinite(val)):
        raise QuadratureError("non-finite integrand in truncated moment")
    return val


def _strip_panels(measure: GibbsMeasure, lyap: LyapunovParams, power: float, lo_fn, R_max: float, n_s: int, n_p1: int, panel: float, order: int):
    """Per-panel log integrals over ``Gamma``; returns (panel right edges, log values), both ``(n_p1, n_panels)``."""
    d = lyap.delta
    s_nodes = np.linspace(0, TWO_PI, n_s, endpoint=False)
    log_ws = np.log(TWO_PI / n_s)
    half_nodes = max(2, n_p1 // 2)
    x1, w1 = np.polynomial.legendre.leggauss(half_nodes)
    # p1 in [-1, 0] and [0, 1] separately: the lower p2 bound has a kink at 0
    p1_nodes = np.concatenate([0.5 * (x1 - 1), 0.5 * (x1 + 1)])
    p1_w = np.concatenate([0.5 * w1, 0.5 * w1])
    xg, wg = np.polynomial.legendre.leggauss(order)
    edges_all, logs_all = [], []
    for p1, wp1 in zip(p1_nodes, p1_w):
        lo = lo_fn(p1, d)
        n_pan = max(1, int(np.ceil((R_max - lo) / panel)))
        edges = np.linspace(lo, R_max, n_pan + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        p2 = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
        lw = np.log((half[:, None] * wg[None, :]).ravel()) + log_ws + np.log(wp1) + np.log(TWO_PI)
        S, P2 = np.meshgrid(s_nodes, p2, indexing="ij")
        P1 = np.full_like(S, p1)
        both = np.stack([_log_integrand(measure, lyap, power, S, P1, sgn * P2) for sgn in (1.0, -1.0)])
        per_node = logsumexp(both, axis=(0, 1)) + lw
        edges_all.append(edges[1:])
        logs_all.append(logsumexp(per_node.reshape(n_pan, order), axis=1))
    return edges_all, logs_all


def truncated_moment_gamma(
    measure: GibbsMeasure,
    lyap: LyapunovParams,
    epsilon: float,
    R_grid,
    n_s: int = 16,
    n_p1: int = 16,
    panel: float = 0.25,
    order: int = 8,
) -> tuple[np.ndarray, np.ndarray]:
    """``log pi(F^(1-eps); Gamma, |p2| <= R)`` and ``log`` of its excess over ``R_grid[0]``.

    ``Gamma = {|p1| <= 1} n Omega_3``; tensor quadrature (trapezoid in the
    relative angle, Gauss-Legendre in both momenta). The ``q1`` integral
    contributes ``2 pi``. The excess is summed panel by panel so it is not lost
    under the (possibly huge) contribution of small momenta.
    """
    R_grid = np.asarray(R_grid, float)
    def lower(p1, d):
        return max((1 + 2 * d) * abs(p1), np.sqrt(max(0.0, 1.0 - p1**2)))

    # panels aligned so that every R in the grid is a panel edge
    pieces_I = []
    for a, b in zip(np.concatenate([[0.0], R_grid[:-1]]), R_grid):
        if a == 0.0:
            e, l = _strip_panels(measure, lyap, 1 - epsilon, lower, b, n_s, n_p1, panel, order)
        else:
            e, l = _strip_panels(measure, lyap, 1 - epsilon, lambda p1, d, a=a: max(a, lower(p1, d)), b, n_s, n_p1, panel, order)
        pieces_I.append(float(logsumexp(np.concatenate(l))))
    shell = np.array(pieces_I)
    logI = np.logaddexp.accumulate(shell)
    excess = np.full(R_grid.shape, -np.inf)
    if R_grid.size > 1:
        excess[1:] = np.logaddexp.accumulate(shell[1:])
    return logI, excess


def check_nonintegrability(
    measure: GibbsMeasure,
    lyap: LyapunovParams,
    epsilon: float,
    R_grid=(2.0, 4.0, 8.0, 12.0, 16.0, 24.0, 32.0),
    plateau_tol: float = 1e-6,
    **quad,
) -> DivergenceReport:
    """Growth of truncated ``pi(F^(1-eps))`` over the strip ``Gamma`` as R increases.

    Divergent when the excess keeps growing with non-shrinking log increments
    (more than ``plateau_tol`` relative to the total), plateau otherwise.
    """
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    R = np.asarray(R_grid, float)
    if R.size < 3 or np.any(np.diff(R) <= 0):
        raise ValueError("R_grid must be increasing with at least 3 radii")
    logI, excess = truncated_moment_gamma(measure, lyap, epsilon, R, **quad)
    inc = np.diff(excess[1:])
    # share of the total carried by the outermost shell
    last_shell = excess[-1] + np.log(-np.expm1(-inc[-1])) if inc[-1] > 0 else -np.inf
    shell_share = float(np.exp(last_shell - logI[-1]))
    growing = bool(inc.size >= 2 and inc[-1] > 0 and inc[-1] >= 0.999 * inc[-2])
    divergent = growing and (shell_share > plateau_tol or inc[-1] > 1.0)
    k = min(3, R.size - 1)
    rate = float(np.polyfit(R[-k:] ** 2 / 2, excess[-k:], 1)[0])
    expected = (1 - epsilon) * lyap.beta_plus - 1.0 / measure.params.temperature
    return DivergenceReport(float(epsilon), R, logI, excess, divergent, rate, expected)


def truncated_moment_full(measure: GibbsMeasure, lyap: LyapunovParams, epsilon: float, R: float, n_s: int = 32, n_r: int = 64, n_theta: int = 256) -> float:
    """``log pi(F^(1-eps); |p| <= R)`` over all of momentum space (polar quadrature)."""
    s = np.linspace(0, TWO_PI, n_s, endpoint=False)
    r, wr = _gauss_panels(0.0, R, max(R / 16, 0.05), max(4, n_r // 16))
    th = np.linspace(0, TWO_PI, n_theta, endpoint=False)
    S, Rr, Th = np.meshgrid(s, r, th, indexing="ij")
    lw = np.log(TWO_PI / n_s) + np.log(wr)[None, :, None] + np.log(TWO_PI / n_theta) + np.log(Rr) + np.log(TWO_PI)
    vals = lw + _log_integrand(measure, lyap, 1.0 - epsilon, S, Rr * np.cos(Th), Rr * np.sin(Th))
    return float(logsumexp(vals))
