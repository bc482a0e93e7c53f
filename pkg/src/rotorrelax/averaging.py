"""Averaged momentum of the fast rotor and numerical order measurements.

When ``|p2|`` is large the second rotor spins fast and ``p2`` only oscillates.
Adding counter-terms ``g(s) p1^k / (p2 - p1)^l`` (``s = q2 - q1``) removes the
oscillating part of its drift level by level:

    level 1:  + W / D
    level 2:  + (gamma p1 W1 - W^2) / D^3
    bar:      + gamma^2 p1 W2 / D^4 + 3 gamma^2 p1^2 W2 / D^5

with ``D = p2 - p1``.  A term ``f(q) p1^k p2^m / D^l`` has order ``k + m - l``;
the drift of the fully corrected momentum is of order -3 and its noise
coefficient of order -2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import ModelParams, Observable, State, apply_generator

DEGENERACY_THRESHOLD = 1e-8
LEVELS = (0, 1, 2, "bar")


class DegenerateDenominatorError(ValueError):
    """``|p2 - p1|`` is too small for the corrected momenta to be defined."""


@dataclass(frozen=True)
class _Term:
    coef: float
    g: Callable
    dg: Callable
    k: int
    ell: int


def _terms(params: ModelParams, level) -> list[_Term]:
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    pot, g = params.potential, params.gamma
    out: list[_Term] = []
    if level == 0:
        return out
    out.append(_Term(1.0, pot.W, pot.w, 0, 1))
    if level == 1:
        return out
    out.append(_Term(g, pot.W1, pot.W, 1, 3))
    out.append(_Term(-1.0, lambda s: pot.W(s) ** 2, lambda s: 2.0 * pot.W(s) * pot.w(s), 0, 3))
    if level == 2:
        return out
    out.append(_Term(g * g, pot.W2, pot.W1, 1, 4))
    out.append(_Term(3.0 * g * g, pot.W2, pot.W1, 2, 5))
    return out


def _denominator(x: State, check: bool = True):
    d = np.subtract(x.p2, x.p1)
    if check and np.any(np.abs(d) < DEGENERACY_THRESHOLD):
        raise DegenerateDenominatorError("corrected momentum undefined: |p2 - p1| < 1e-8")
    return d


def _pow(base, e):
    # p1**0 must be 1 even where p1 == 0
    return np.ones_like(base) if e == 0 else base**e


def corrected_momentum(params: ModelParams, x: State, level=("bar")):
    """Value of the corrected momentum at ``level`` (0 gives ``p2`` itself)."""
    terms = _terms(params, level)
    p1 = np.asarray(x.p1, float)
    out = np.asarray(x.p2, float) + 0.0
    if not terms:
        return out
    d = _denominator(x)
    s = x.s
    for t in terms:
        out = out + t.coef * t.g(s) * _pow(p1, t.k) / d**t.ell
    return out


def correction1(params: ModelParams, x: State):
    return corrected_momentum(params, x, 1)


def correction2(params: ModelParams, x: State):
    return corrected_momentum(params, x, 2)


def p2_bar(params: ModelParams, x: State):
    return corrected_momentum(params, x, "bar")


def corrected_momentum_derivatives(params: ModelParams, x: State, level="bar"):
    """``(value, (d_q1, d_q2, d_p1, d_p2), d2_p1)`` assembled term by term."""
    terms = _terms(params, level)
    p1 = np.asarray(x.p1, float)
    p2 = np.asarray(x.p2, float)
    zero = np.zeros(np.broadcast(p1, p2).shape)
    val = p2 + zero
    gq, gp1, h11 = zero.copy(), zero.copy(), zero.copy()
    gp2 = zero + 1.0
    if terms:
        d = _denominator(x)
        s = x.s
        for t in terms:
            k, l = t.k, t.ell
            gs, dgs = t.coef * t.g(s), t.coef * t.dg(s)
            dl = d**-l
            pk = _pow(p1, k)
            val = val + gs * pk * dl
            gq = gq + dgs * pk * dl
            gp2 = gp2 - l * gs * pk * dl / d
            # dD/dp1 = -1
            term_p1 = l * pk * dl / d
            term_p1_2 = l * (l + 1) * pk * dl / d**2
            if k >= 1:
                term_p1 = term_p1 + k * _pow(p1, k - 1) * dl
                term_p1_2 = term_p1_2 + 2 * k * l * _pow(p1, k - 1) * dl / d
            if k >= 2:
                term_p1_2 = term_p1_2 + k * (k - 1) * _pow(p1, k - 2) * dl
            gp1 = gp1 + gs * term_p1
            h11 = h11 + gs * term_p1_2
    return val, (-gq, gq, gp1 + zero, gp2 + zero), h11


def momentum_observable(params: ModelParams, level="bar") -> Observable:
    """Observable for the corrected momentum with analytic derivatives."""
    _terms(params, level)

    def value(x):
        return corrected_momentum(params, x, level)

    def grad(x):
        return corrected_momentum_derivatives(params, x, level)[1]

    def d2(x):
        return corrected_momentum_derivatives(params, x, level)[2]

    name = "p2" if level == 0 else f"p2[{level}]"
    return Observable(value, grad, d2, name=name)


def drift(params: ModelParams, x: State, level="bar"):
    """Drift ``L p2^(level)`` of the corrected momentum."""
    return apply_generator(params, momentum_observable(params, level), x)


def noise_coefficient(params: ModelParams, x: State, level="bar"):
    """Diffusion coefficient ``sqrt(2 gamma T) d/dp1`` of the corrected momentum."""
    return params.noise_scale * corrected_momentum_derivatives(params, x, level)[1][2]


@dataclass
class AveragedMomenta:
    p2_1: float | np.ndarray
    p2_2: float | np.ndarray
    p2_bar: float | np.ndarray

    @classmethod
    def at(cls, params: ModelParams, x: State) -> "AveragedMomenta":
        return cls(correction1(params, x), correction2(params, x), p2_bar(params, x))


# ---------------------------------------------------------------------------
# order measurement along rays p1 = lam * p2


class FitError(ValueError):
    pass


@dataclass
class OrderEstimate:
    exponent: float
    residual: float
    ray: float
    P: np.ndarray = field(repr=False)
    max_abs: np.ndarray = field(repr=False)
    intercept: float = 0.0

    def fitted(self) -> np.ndarray:
        return np.exp(self.intercept) * self.P**self.exponent

    def rows(self):
        return list(zip(self.P.tolist(), self.max_abs.tolist(), self.fitted().tolist()))

    def reliable(self, tol: float = 0.1) -> bool:
        return self.residual < tol


DEFAULT_P_GRID = tuple(2.0**k for k in range(4, 13))


def ray_states(P: float, lam: float, angles: np.ndarray, q1: np.ndarray | None = None) -> State:
    q1 = np.zeros_like(angles) if q1 is None else q1
    return State(q1, q1 + angles, np.full_like(angles, lam * P), np.full_like(angles, P))


def measure_order(
    params: ModelParams,
    f: Callable[[State], np.ndarray],
    ray: float,
    P_values: Sequence[float] = DEFAULT_P_GRID,
    n_angles: int = 256,
    seed: int = 0,
    delta: float | None = None,
) -> OrderEstimate:
    """Fit the slope of ``log max_q |f(q1, q2, ray*P, P)|`` against ``log P``.

    The maximum is taken over a uniform grid of relative angles plus random
    ones (random ``q1`` as well).
    """
    bound = 1.0 if delta is None else 1.0 / (1.0 + delta)
    if not abs(ray) < bound:
        raise ValueError(f"ray {ray} outside admissible range (-{bound:.4g}, {bound:.4g})")
    P = np.asarray(P_values, dtype=float)
    if P.size < 4:
        raise FitError("need at least 4 grid points to fit an order")
    rng = np.random.default_rng(seed)
    n_grid = n_angles // 2
    angles = np.concatenate([np.linspace(0, 2 * np.pi, n_grid, endpoint=False), rng.uniform(0, 2 * np.pi, n_angles - n_grid)])
    q1 = rng.uniform(0, 2 * np.pi, angles.size)
    m = np.array([np.max(np.abs(f(ray_states(p, ray, angles, q1)))) for p in P])
    if not np.all(np.isfinite(m)) or np.any(m <= 0):
        raise FitError("function vanishes or is non-finite on the grid; order undefined")
    lp, lm = np.log(P), np.log(m)
    slope, intercept = np.polyfit(lp, lm, 1)
    resid = lm - (slope * lp + intercept)
    return OrderEstimate(float(slope), float(np.sqrt(np.mean(resid**2))), float(ray), P, m, float(intercept))


def drift_function(params: ModelParams, level="bar") -> Callable[[State], np.ndarray]:
    obs = momentum_observable(params, level)
    return lambda x: apply_generator(params, obs, x)


def noise_function(params: ModelParams, level="bar") -> Callable[[State], np.ndarray]:
    return lambda x: noise_coefficient(params, x, level)


def order_chain(params: ModelParams, rays: Sequence[float], P_values=DEFAULT_P_GRID, n_angles: int = 256, seed: int = 0):
    """Measured drift orders of every correction level and of the noise of ``p2_bar`` on each ray."""
    out = {}
    for lam in rays:
        for level in LEVELS:
            out[("drift", level, lam)] = measure_order(params, drift_function(params, level), lam, P_values, n_angles, seed)
        out[("noise", "bar", lam)] = measure_order(params, noise_function(params, "bar"), lam, P_values, n_angles, seed)
    return out
