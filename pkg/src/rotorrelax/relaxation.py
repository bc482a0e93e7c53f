"""Relaxation experiments: tail-comparison TV lower bound, escape times, stretched-rate fits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .dynamics import ModelParams, State, Trajectory, evolve_ensemble, make_ensemble, parallel_map
from .gibbs import GibbsMeasure, logF_quantiles, tail_F
from .lyapunov import LyapunovParams, eval_logF

logger = logging.getLogger(__name__)


class FitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# TV lower bound by tail comparison


@dataclass
class TailCurve:
    """Empirical tails of F along an ensemble and the Gibbs tails on the same grid."""

    t: np.ndarray
    log_w: np.ndarray
    nu_tail: np.ndarray  # (len(t), len(log_w))
    nu_stderr: np.ndarray
    pi_tail: np.ndarray
    pi_stderr: np.ndarray
    LB: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    LB_stderr: np.ndarray
    argmax_log_w: np.ndarray
    n_traj: int
    edge_hits: np.ndarray = field(repr=False)

    def rows(self):
        return list(zip(self.t.tolist(), self.LB.tolist(), self.ci_lo.tolist(), self.ci_hi.tolist(), self.argmax_log_w.tolist()))


def make_w_grid(measure: GibbsMeasure, lyap: LyapunovParams, upper_log_w: float = 0.0, n: int = 48, q_lo: float = 0.5, q_hi: float = 0.9999, seed: int = 0) -> np.ndarray:
    """Thresholds ``log w`` log-spaced between Gibbs quantiles of ``log F``, extended up to ``upper_log_w``."""
    lo, hi = logF_quantiles(measure, lyap, [q_lo, q_hi], seed=seed)
    hi = max(hi, upper_log_w)
    lo = max(lo, 1e-3)
    return np.geomspace(lo, hi, n)


def _tails(logF: np.ndarray, log_w: np.ndarray) -> np.ndarray:
    s = np.sort(logF)
    return 1.0 - np.searchsorted(s, log_w, side="right") / s.size


def tv_lower_bound(
    params: ModelParams,
    lyap: LyapunovParams,
    x0,
    t_grid: Sequence[float],
    n_traj: int = 1000,
    seed: int = 0,
    dt: float = 1e-3,
    log_w: np.ndarray | None = None,
    n_boot: int = 200,
    tail_samples: int = 40_000,
    scheme: str = "splitting",
    workers: int | None = 1,
) -> TailCurve:
    """``LB(t) = max_w |pi(F > w) - nu_t(F > w)|`` along an ensemble started at ``x0``.

    ``x0`` is a single state or one state per trajectory (shape ``(n_traj, 4)``).
    Any threshold gives a valid lower bound on the total variation distance.
    """
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    if np.any(t_grid < 0):
        raise ValueError("times must be non-negative")
    measure = GibbsMeasure(params)
    x0_arr = np.asarray(x0.as_array() if isinstance(x0, State) else x0, float)
    ens = make_ensemble(params, x0_arr, n_traj, dt, seed, scheme=scheme)
    start_logF = eval_logF(params, lyap, State.from_array(np.broadcast_to(x0_arr, (n_traj, 4))))
    if log_w is None:
        log_w = make_w_grid(measure, lyap, upper_log_w=float(np.max(start_logF)) * 1.05, seed=seed)
    log_w = np.asarray(log_w, float)
    pis = [tail_F(measure, lyap, log_w=lw, n=tail_samples, seed=seed + 7 + k) for k, lw in enumerate(log_w)]
    pi_tail = np.array([e.prob for e in pis])
    pi_se = np.array([e.stderr for e in pis])
    rng = np.random.default_rng(seed + 3)
    boot_idx = rng.integers(0, n_traj, size=(n_boot, n_traj))
    nu, nu_se, LB, lo, hi, se, arg, edge = [], [], [], [], [], [], [], []
    steps_done = 0
    for t in t_grid:
        target = int(round(t / dt))
        xs = evolve_ensemble(ens, max(target - steps_done, 0), workers)
        steps_done = max(target, steps_done)
        lf = eval_logF(params, lyap, State.from_array(xs))
        nt = _tails(lf, log_w)
        gap = np.abs(pi_tail - nt)
        j = int(np.argmax(gap))
        boots = np.array([np.max(np.abs(pi_tail - _tails(lf[b], log_w))) for b in boot_idx])
        nu.append(nt)
        nu_se.append(np.sqrt(nt * (1 - nt) / n_traj))
        LB.append(max(float(gap[j]), 0.0))
        lo.append(float(np.quantile(boots, 0.025)))
        hi.append(float(np.quantile(boots, 0.975)))
        se.append(float(boots.std(ddof=1)))
        arg.append(float(log_w[j]))
        at_edge = j in (0, log_w.size - 1)
        edge.append(at_edge)
        if at_edge:
            logger.warning("t=%g: maximising threshold at the edge of the w grid (log w=%.4g)", t, log_w[j])
    return TailCurve(
        t_grid, log_w, np.array(nu), np.array(nu_se), pi_tail, pi_se,
        np.array(LB), np.array(lo), np.array(hi), np.array(se), np.array(arg), n_traj, np.array(edge),
    )


def histogram_tv(a: np.ndarray, b: np.ndarray, bins: int = 20) -> float:
    """Plug-in total variation between two samples on a common histogram (rows are points)."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    both = np.vstack([a, b])
    edges = [np.linspace(both[:, k].min(), both[:, k].max() + 1e-12, bins + 1) for k in range(both.shape[1])]
    ha, _ = np.histogramdd(a, bins=edges)
    hb, _ = np.histogramdd(b, bins=edges)
    return float(0.5 * np.abs(ha / ha.sum() - hb / hb.sum()).sum())


# ---------------------------------------------------------------------------
# escape times of the fast rotor


@dataclass
class EscapeStats:
    P: float
    taus: np.ndarray = field(repr=False)
    censored: np.ndarray = field(repr=False)
    mean_tau: float = 0.0
    q10: float = 0.0
    q50: float = 0.0
    q90: float = 0.0
    censored_frac: float = 0.0

    def row(self):
        return (self.P, self.mean_tau, self.q10, self.q50, self.q90, self.censored_frac)


def escape_time(
    params: ModelParams,
    P: float,
    energy_floor: float,
    n_traj: int,
    seed: int,
    dt: float = 1e-3,
    max_steps: int = 10**9,
    workers: int | None = 1,
) -> EscapeStats:
    """First time ``|p2| <= energy_floor`` from ``(0, 0, 0, P)``.

    Trajectory ``i`` uses the same noise stream for every ``P`` (common random
    numbers). Trajectories still above the floor after ``max_steps`` are
    censored; their budget time enters the mean as a lower bound.
    """
    taus = np.zeros(n_traj)
    cens = np.zeros(n_traj, dtype=bool)
    if abs(P) > energy_floor:

        def run(i):
            tr = Trajectory(params, np.array([0.0, 0.0, 0.0, float(P)]), dt, seed, index=i)
            taken = tr.advance(max_steps, floor=energy_floor)
            return taken * dt, abs(tr.x[3]) > energy_floor

        for i, (tau, c) in enumerate(parallel_map(run, range(n_traj), workers)):
            taus[i], cens[i] = tau, c
    if cens.any():
        logger.warning("P=%g: %d of %d trajectories censored at %d steps", P, int(cens.sum()), n_traj, max_steps)
    q10, q50, q90 = np.quantile(taus, [0.1, 0.5, 0.9])
    return EscapeStats(float(P), taus, cens, float(taus.mean()), float(q10), float(q50), float(q90), float(cens.mean()))


def escape_scaling(stats: Sequence[EscapeStats]) -> tuple[float, float]:
    """Slope and intercept of ``log E[tau]`` against ``log P``."""
    P = np.array([s.P for s in stats])
    m = np.array([s.mean_tau for s in stats])
    if np.any(m <= 0):
        raise FitError("mean escape time must be positive at every P")
    slope, icpt = np.polyfit(np.log(P), np.log(m), 1)
    return float(slope), float(icpt)


# ---------------------------------------------------------------------------
# stretched-exponential fit


@dataclass
class RateFit:
    alpha: float
    alpha_ci: tuple[float, float]
    c: float
    log_h: float
    residual: float
    window: tuple[float, float]
    n_points: int
    c_half: float  # c of the fit with the exponent pinned at 1/2
    residual_half: float
    residual_exp: float  # residual with the exponent pinned at 1
    residual_threshold: float = 0.1

    @property
    def residual_ratio(self) -> float:
        """How much better the free fit is than a pure exponential."""
        return self.residual_exp / self.residual if self.residual > 0 else np.inf

    @property
    def quoted_alpha(self) -> float | None:
        return self.alpha if self.residual < self.residual_threshold else None

    def summary(self) -> dict:
        return {
            "alpha": self.alpha, "alpha_ci_lo": self.alpha_ci[0], "alpha_ci_hi": self.alpha_ci[1],
            "c": self.c, "log_h": self.log_h, "residual": self.residual,
            "t_min": self.window[0], "t_max": self.window[1], "n_points": self.n_points,
            "c_half": self.c_half, "residual_half": self.residual_half,
            "residual_exp": self.residual_exp, "residual_ratio": self.residual_ratio,
        }


def _fixed_alpha_fit(t, y, alpha):
    X = np.column_stack([np.ones_like(t), -(t**alpha)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ coef
    return coef, float(np.sqrt(np.mean(r**2)))


def fit_stretched_rate(t, LB, stderr=None, min_points: int = 6, residual_threshold: float = 0.1) -> RateFit:
    """Least-squares fit of ``log LB = log h - c t^alpha`` on points with ``LB > 3 stderr``."""
    t = np.asarray(t, float)
    LB = np.asarray(LB, float)
    keep = (LB > 0) & (t > 0)
    if stderr is not None:
        keep &= LB > 3 * np.asarray(stderr, float)
    t, y = t[keep], np.log(LB[keep])
    if t.size < min_points:
        raise FitError(f"need at least {min_points} usable points, have {t.size}")
    if t.max() / t.min() < 10:
        raise FitError("usable window spans less than one decade in t")

    def model(tt, log_h, c, alpha):
        return log_h - c * tt**alpha

    best = None
    for a0 in (0.3, 0.5, 0.8, 1.0, 1.5):
        (lh0, c0), _ = _fixed_alpha_fit(t, y, a0)
        try:
            popt, pcov = optimize.curve_fit(model, t, y, p0=[lh0, c0, a0], bounds=([-np.inf, -np.inf, 0.01], [np.inf, np.inf, 5.0]), maxfev=20000)
        except (RuntimeError, ValueError):
            continue
        res = float(np.sqrt(np.mean((y - model(t, *popt)) ** 2)))
        if best is None or res < best[2]:
            best = (popt, pcov, res)
    if best is None:
        raise FitError("stretched-exponential fit did not converge")
    popt, pcov, res = best
    sd = float(np.sqrt(pcov[2, 2])) if np.all(np.isfinite(pcov)) else np.inf
    (_, c_half), r_half = _fixed_alpha_fit(t, y, 0.5)
    _, r_exp = _fixed_alpha_fit(t, y, 1.0)
    return RateFit(
        alpha=float(popt[2]),
        alpha_ci=(float(popt[2] - 1.96 * sd), float(popt[2] + 1.96 * sd)),
        c=float(popt[1]),
        log_h=float(popt[0]),
        residual=res,
        window=(float(t.min()), float(t.max())),
        n_points=int(t.size),
        c_half=float(c_half),
        residual_half=r_half,
        residual_exp=r_exp,
        residual_threshold=residual_threshold,
    )


def lower_bound_rate_constant(epsilon: float, A: float) -> float:
    """Rate constant ``(2/eps - 1) sqrt(2A)`` of the tail-comparison lower bound."""
    return (2.0 / epsilon - 1.0) * np.sqrt(2.0 * A)


# ---------------------------------------------------------------------------
# moment growth


@dataclass
class MomentGrowth:
    t: np.ndarray
    log_mean_F: np.ndarray
    log_stderr: np.ndarray  # log of the standard error of the mean of F
    log_bound: np.ndarray  # log F(x0) + sqrt(2 A t)
    log_F0: float

    def holds(self, n_se: float = 3.0) -> np.ndarray:
        return self.log_mean_F <= np.logaddexp(self.log_bound, np.log(n_se) + self.log_stderr)


def moment_growth(
    params: ModelParams,
    lyap: LyapunovParams,
    x0,
    t_grid,
    A: float,
    n_traj: int = 1000,
    seed: int = 0,
    dt: float = 1e-3,
    workers: int | None = 1,
) -> MomentGrowth:
    """Monte Carlo ``E_x F(x_t)`` (log domain) against the comparison bound ``F(x) exp(sqrt(2 A t))``."""
    t_grid = np.asarray(sorted(t_grid), float)
    x0 = np.asarray(x0.as_array() if isinstance(x0, State) else x0, float)
    ens = make_ensemble(params, x0, n_traj, dt, seed)
    log_F0 = float(eval_logF(params, lyap, State.from_array(x0)))
    out_m, out_se = [], []
    done = 0
    for t in t_grid:
        target = int(round(t / dt))
        xs = evolve_ensemble(ens, max(target - done, 0), workers)
        done = max(target, done)
        lf = eval_logF(params, lyap, State.from_array(xs))
        lm = float(logsumexp(lf) - np.log(n_traj))
        # var of F relative to its mean, computed stably
        rel = np.exp(lf - lm)
        out_m.append(lm)
        out_se.append(lm + 0.5 * np.log(max(rel.var(ddof=1), 1e-300) / n_traj))
    log_bound = log_F0 + np.sqrt(2 * A * t_grid)
    return MomentGrowth(t_grid, np.array(out_m), np.array(out_se), log_bound, log_F0)
