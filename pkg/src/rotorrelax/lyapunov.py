"""Test function F, momentum-space partition, and sample-based drift certification.

``F = 1 + exp(beta_minus H) + rho(p) exp(beta_plus pbar^2 / 2)`` where ``pbar`` is
the averaged momentum and ``rho`` a C^2 cutoff that is 1 far inside the
``p2``-cone and 0 outside the wider cone. Everything is handled in log domain.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy.special import logsumexp

from .averaging import corrected_momentum_derivatives
from .dynamics import ModelParams, State, hamiltonian

logger = logging.getLogger(__name__)


class ParameterConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class LyapunovParams:
    """Parameters of the test function.

    Requires ``beta_minus < 1/T < beta_plus < (1 + 1/(1 + 2 delta)^2) beta_minus``.
    ``blend_inner_radius`` sets where the cutoff starts switching on inside the
    unit disc (it is fully on at ``|p| = 1``).
    """

    beta_minus: float = 0.9
    beta_plus: float = 1.1
    delta: float = 0.5
    A: float = 1.0
    temperature: float = 1.0
    blend_inner_radius: float = 0.75

    def __post_init__(self):
        bm, bp, d, T = self.beta_minus, self.beta_plus, self.delta, self.temperature
        if not (d > 0 and T > 0 and bm > 0):
            raise ParameterConstraintError("beta_minus, delta and temperature must be positive")
        upper = (1.0 + 1.0 / (1.0 + 2.0 * d) ** 2) * bm
        if not (bm < 1.0 / T < bp < upper):
            raise ParameterConstraintError(
                "need beta_minus < 1/T < beta_plus < (1 + 1/(1+2*delta)^2) * beta_minus; "
                f"got beta_minus={bm}, 1/T={1.0 / T:.6g}, beta_plus={bp}, upper bound={upper:.6g}"
            )
        if not self.A > 0:
            raise ParameterConstraintError(f"A must be > 0, got {self.A}")
        if not 0 < self.blend_inner_radius < 1:
            raise ParameterConstraintError("blend_inner_radius must lie in (0, 1)")

    def check_model(self, params: ModelParams):
        if not np.isclose(params.temperature, self.temperature):
            raise ParameterConstraintError(
                f"Lyapunov parameters were validated for T={self.temperature}, model has T={params.temperature}"
            )

    @property
    def divergence_threshold(self) -> float:
        """Largest eps with ``(1 - eps) beta_plus > 1/T``."""
        return 1.0 - 1.0 / (self.temperature * self.beta_plus)


class RegionLabel(enum.IntEnum):
    Omega0 = 0
    Omega1 = 1
    Omega2 = 2
    Omega3 = 3


def classify_array(p1, p2, delta: float) -> np.ndarray:
    p1, p2 = np.abs(np.asarray(p1, float)), np.abs(np.asarray(p2, float))
    out = np.full(np.broadcast(p1, p2).shape, 3, dtype=np.int8)
    out[p2 <= (1 + 2 * delta) * p1] = 2
    out[p2 <= (1 + delta) * p1] = 1
    out[p1**2 + p2**2 < 1] = 0
    return out


def classify(x: State, delta: float) -> RegionLabel:
    return RegionLabel(int(classify_array(x.p1, x.p2, delta)))


# ---------------------------------------------------------------------------
# cutoff


def smoothstep(u):
    """C^2 step ``6u^5 - 15u^4 + 10u^3`` on [0, 1] with first and second derivatives."""
    u = np.clip(u, 0.0, 1.0)
    v = u**3 * (u * (6 * u - 15) + 10)
    dv = 30 * u**2 * (u - 1) ** 2
    d2v = 60 * u * (u - 1) * (2 * u - 1)
    return v, dv, d2v


def chi(ratio, delta: float):
    """Cone cutoff: 0 for ``ratio <= 1 + delta``, 1 for ``ratio >= 1 + 2 delta``."""
    v, dv, d2v = smoothstep((np.asarray(ratio, float) - 1 - delta) / delta)
    return v, dv / delta, d2v / delta**2


def rho_derivatives(p1, p2, delta: float, inner: float = 0.75):
    """``(rho, d/dp1, d/dp2, d2/dp1^2)`` of ``rho = b(|p|) chi(|p2/p1|)``."""
    p1 = np.asarray(p1, float)
    p2 = np.asarray(p2, float)
    p1, p2 = np.broadcast_arrays(p1, p2)
    r = np.hypot(p1, p2)
    b, db, d2b = smoothstep((r - inner) / (1 - inner))
    db, d2b = db / (1 - inner), d2b / (1 - inner) ** 2
    a1 = np.abs(p1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(a1 > 0, np.abs(p2) / np.where(a1 > 0, a1, 1.0), np.inf)
        c, dc, d2c = chi(np.where(np.isfinite(ratio), ratio, 1e300), delta)
        # chi is flat wherever ratio is infinite or outside the transition band
        safe1 = np.where(a1 > 0, p1, 1.0)
        s1 = np.where(a1 > 0, -ratio / safe1, 0.0)
        s2 = np.where(a1 > 0, np.sign(p2) / np.where(a1 > 0, a1, 1.0), 0.0)
        s11 = np.where(a1 > 0, 2 * ratio / safe1**2, 0.0)
        # b is flat below the inner radius, so its chain-rule terms only matter beyond it
        safer = np.where(r >= inner, r, 1.0)
        r1, r2, r11 = p1 / safer, p2 / safer, p2**2 / safer**3
    band = (dc != 0) | (d2c != 0)
    s1, s2, s11 = (np.where(band, v, 0.0) for v in (s1, s2, s11))
    rho = b * c
    d1 = db * r1 * c + b * dc * s1
    d2 = db * r2 * c + b * dc * s2
    d11 = d2b * r1**2 * c + db * r11 * c + 2 * db * r1 * dc * s1 + b * d2c * s1**2 + b * dc * s11
    return rho, d1, d2, d11


def cutoff_rho(p1, p2, delta: float, inner: float = 0.75):
    out = rho_derivatives(p1, p2, delta, inner)[0]
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# F and LF


@dataclass
class FEvaluation:
    """Pieces of F at a batch of states (log domain)."""

    logF: np.ndarray
    log_e_minus: np.ndarray  # beta_minus * H
    log_rho_e_plus: np.ndarray  # log(rho) + beta_plus pbar^2 / 2, -inf where rho = 0
    pbar: np.ndarray  # nan where rho = 0


def _evaluate_F(params: ModelParams, lyap: LyapunovParams, x: State, with_derivs: bool = False):
    lyap.check_model(params)
    p1 = np.atleast_1d(np.asarray(x.p1, float))
    p2 = np.atleast_1d(np.asarray(x.p2, float))
    q1 = np.broadcast_to(np.atleast_1d(np.asarray(x.q1, float)), p1.shape)
    q2 = np.broadcast_to(np.atleast_1d(np.asarray(x.q2, float)), p1.shape)
    st = State(q1, q2, p1, p2)
    H = hamiltonian(params, st)
    rho, r1, r2, r11 = rho_derivatives(p1, p2, lyap.delta, lyap.blend_inner_radius)
    on = rho > 0
    pbar = np.full(p1.shape, np.nan)
    grads = None
    if np.any(on):
        sub = State(q1[on], q2[on], p1[on], p2[on])
        val, grad, h11 = corrected_momentum_derivatives(params, sub, "bar")
        pbar[on] = val
        grads = (grad, h11)
    with np.errstate(divide="ignore"):
        lre = np.where(on, np.log(np.where(on, rho, 1.0)) + 0.5 * lyap.beta_plus * np.nan_to_num(pbar) ** 2, -np.inf)
    lem = lyap.beta_minus * H
    logF = logsumexp(np.stack([np.zeros_like(lem), lem, lre]), axis=0)
    ev = FEvaluation(logF, lem, lre, pbar)
    if not with_derivs:
        return ev
    return ev, st, (rho, r1, r2, r11), on, grads


def eval_logF(params: ModelParams, lyap: LyapunovParams, x: State):
    out = _evaluate_F(params, lyap, x).logF
    return out if np.ndim(x.p1) else float(out[0])


def LF_over_F(params: ModelParams, lyap: LyapunovParams, x: State):
    """``(LF / F, log F)`` with analytic chain-rule derivatives."""
    ev, st, (rho, r1, r2, r11), on, grads = _evaluate_F(params, lyap, x, with_derivs=True)
    g, T = params.gamma, params.temperature
    bm, bp = lyap.beta_minus, lyap.beta_plus
    p1 = np.asarray(st.p1)
    out = g * bm * ((bm * T - 1) * p1**2 + T) * np.exp(ev.log_e_minus - ev.logF)
    if grads is not None:
        (gq1, gq2, gp1, gp2), h11 = grads
        sub = State(st.q1[on], st.q2[on], p1[on], np.asarray(st.p2)[on])
        w = params.potential.w(sub.s)
        pb = ev.pbar[on]
        P1, P2 = sub.p1, sub.p2
        L_pbar = P1 * gq1 + P2 * gq2 + w * (gp1 - gp2) - g * P1 * gp1 + g * T * h11
        # L e^{bp pbar^2/2} / e^{...}
        LE_over_E = bp * pb * L_pbar + g * T * bp * (1 + bp * pb**2) * gp1**2
        R, R1, R2, R11 = rho[on], r1[on], r2[on], r11[on]
        L_rho = w * (R1 - R2) - g * P1 * R1 + g * T * R11
        cross = 2 * g * T * R1 * bp * pb * gp1
        e_over_F = np.exp(0.5 * bp * pb**2 - ev.logF[on])
        out[on] += e_over_F * (R * LE_over_E + L_rho + cross)
    return out, ev.logF


def phi(lyap: LyapunovParams, s):
    """``A s / (2 + log s)`` on ``s >= 1``."""
    s = np.asarray(s, float)
    if np.any(s < 1):
        raise ValueError("phi is defined on [1, inf)")
    out = lyap.A * s / (2 + np.log(s))
    return out if out.ndim else float(out)


def drift_margin(params: ModelParams, lyap: LyapunovParams, x: State):
    """Scale-free margin ``LF (2 + log F) / F``; ``LF <= phi(F)`` iff margin <= A."""
    r, logF = LF_over_F(params, lyap, x)
    return r * (2 + logF), logF


def ode_comparison_bound(lyap: LyapunovParams, F0, t):
    """Solution of ``y' = phi(y)``, ``y(0) = F0``, and its upper bound ``F0 exp(sqrt(2 A t))``.

    Both returned in log domain: ``(log y(t), log F0 + sqrt(2 A t))``.
    """
    F0 = np.asarray(F0, float)
    t = np.asarray(t, float)
    if np.any(F0 < 1) or np.any(t < 0):
        raise ValueError("need F0 >= 1 and t >= 0")
    log_exact = np.sqrt((np.log(F0) + 2) ** 2 + 2 * lyap.A * t) - 2
    log_simple = np.log(F0) + np.sqrt(2 * lyap.A * t)
    return log_exact, log_simple


def integrate_comparison_ode(lyap: LyapunovParams, F0: float, t: float, rtol: float = 1e-10) -> float:
    """Numerical solution of ``y' = phi(y)`` in the variable ``u = log y`` (Radau)."""
    sol = integrate.solve_ivp(
        lambda _t, u: [lyap.A / (2 + u[0])], (0.0, t), [np.log(F0)], method="Radau", rtol=rtol, atol=1e-12
    )
    return float(np.exp(sol.y[0, -1]))


# ---------------------------------------------------------------------------
# sampling and certification


REGION_CONES = {
    # polar angle ranges of |p2|/|p1| within the first quadrant, folded by symmetry
    RegionLabel.Omega1: lambda d: (0.0, np.arctan(1 + d)),
    RegionLabel.Omega2: lambda d: (np.arctan(1 + d), np.arctan(1 + 2 * d)),
    RegionLabel.Omega3: lambda d: (np.arctan(1 + 2 * d), np.pi / 2),
}


@dataclass
class SamplingPlan:
    n: int = 100_000
    cap: float = 1000.0
    seed: int = 0
    fractions: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    #: share of the Omega_1..3 strata drawn near the region boundaries (|p| ~ 1, cone edges)
    boundary_share: float = 0.2
    #: share of Omega_3 drawn with |p1| below ``g_width`` (the set where p1 stays thermal)
    g_share: float = 0.25
    g_width: float = 3.0


def _cone_sample(rng, n, lo, hi, rmin, cap, boundary_share):
    nb = int(boundary_share * n)
    r = np.exp(rng.uniform(np.log(rmin), np.log(cap), n))
    theta = rng.uniform(lo, hi, n)
    if nb:
        # hug the inner circle and both cone edges
        r[:nb] = rmin * np.exp(rng.exponential(0.02, nb))
        edge = rng.integers(0, 3, nb)
        near = np.where(edge == 0, lo + (hi - lo) * rng.exponential(0.01, nb), hi - (hi - lo) * rng.exponential(0.01, nb))
        theta[:nb] = np.where(edge == 2, theta[:nb], np.clip(near, lo, hi))
    return r, theta


def sample_states(lyap: LyapunovParams, plan: SamplingPlan, regions=(0, 1, 2, 3)) -> tuple[State, np.ndarray]:
    """Stratified momentum sample with uniform angles; returns ``(states, region labels)``."""
    rng = np.random.default_rng(plan.seed)
    d = lyap.delta
    counts = np.array([plan.fractions[k] if k in regions else 0.0 for k in range(4)])
    counts = np.floor(plan.n * counts / counts.sum()).astype(int)
    counts[max(regions)] += plan.n - counts.sum()
    p1s, p2s = [], []
    for k in range(4):
        n = counts[k]
        if n == 0:
            continue
        if k == 0:
            r = np.sqrt(rng.uniform(0, 1, n)) * (1 - 1e-12)
            th = rng.uniform(0, 2 * np.pi, n)
            a, b = r * np.cos(th), r * np.sin(th)
        else:
            lo, hi = REGION_CONES[RegionLabel(k)](d)
            r, th = _cone_sample(rng, n, lo, hi, 1.0, plan.cap, plan.boundary_share)
            a, b = r * np.cos(th), r * np.sin(th)
            if k == 3:
                ng = int(plan.g_share * n)
                if ng:
                    pa = rng.uniform(-1, 1, ng) * plan.g_width
                    pb = np.exp(rng.uniform(0, np.log(plan.cap), ng))
                    pb = np.maximum(pb, (1 + 2 * d) * np.abs(pa) * (1 + 1e-9) + 1e-9)
                    pb = np.maximum(pb, np.sqrt(np.maximum(1 - pa**2, 0)) + 1e-9)
                    a[-ng:], b[-ng:] = np.abs(pa), pb
            a = a * rng.choice([-1.0, 1.0], n)
            b = b * rng.choice([-1.0, 1.0], n)
        p1s.append(a)
        p2s.append(b)
    p1 = np.concatenate(p1s)
    p2 = np.concatenate(p2s)
    q1 = rng.uniform(0, 2 * np.pi, p1.size)
    s = rng.uniform(0, 2 * np.pi, p1.size)
    labels = classify_array(p1, p2, d)
    return State(q1, q1 + s, p1, p2), labels


def _polish(fun, x0: np.ndarray, admissible, iters: int = 400) -> tuple[float, np.ndarray]:
    """Local ascent of ``fun`` from ``x0`` inside ``admissible`` (Nelder-Mead, penalised)."""

    def neg(z):
        if not admissible(z):
            return np.inf
        v = fun(z)
        return -v if np.isfinite(v) else np.inf

    res = optimize.minimize(neg, x0, method="Nelder-Mead", options={"maxiter": iters, "xatol": 1e-10, "fatol": 1e-12})
    best = -res.fun if np.isfinite(res.fun) else -neg(x0)
    return float(best), res.x


@dataclass
class DriftReport:
    A_min: float
    sample_max: float
    worst_state: np.ndarray
    worst_region: int
    max_by_region: dict
    n_samples: int
    cap: float
    edge_flag: bool
    fd_audit_max_rel_error: float
    table: np.ndarray = field(repr=False)  # q1, q2, p1, p2, region, logF, LF/phi(F)

    def summary(self) -> str:
        regions = " ".join(f"max_margin_omega{k}={v:.6g}" for k, v in sorted(self.max_by_region.items()))
        return (
            f"A_min={self.A_min:.6g} sample_max_margin={self.sample_max:.6g} n_samples={self.n_samples} "
            f"cap={self.cap:g} worst_region=Omega{self.worst_region} edge_flag={int(self.edge_flag)} "
            f"fd_audit_max_rel_error={self.fd_audit_max_rel_error:.3g} {regions}"
        )


def logF_observable(params: ModelParams, lyap: LyapunovParams):
    from .dynamics import Observable

    return Observable.from_function(lambda x: eval_logF(params, lyap, x), h=1e-5, name="logF")


def fd_LF_over_F(params: ModelParams, lyap: LyapunovParams, x: State, h: float = 1e-4):
    """Finite-difference route: ``LF/F = L(log F) + gamma T (d log F/dp1)^2``."""
    from .dynamics import apply_generator

    obs = logF_observable(params, lyap)
    obs = type(obs).from_function(obs.value, h=h)
    g1 = obs.gradient(x)[2]
    return apply_generator(params, obs, x) + params.gamma * params.temperature * g1**2


def _audit_pool(lyap: LyapunovParams, arr: np.ndarray, r_max: float = 50.0, gap: float = 0.02) -> np.ndarray:
    """Indices of states away from every kink of the cutoff (finite differences are unreliable there)."""
    p1, p2 = np.abs(arr[:, 2]), np.abs(arr[:, 3])
    r = np.hypot(p1, p2)
    with np.errstate(divide="ignore"):
        ratio = np.where(p1 > 0, p2 / np.where(p1 > 0, p1, 1), np.inf)
    d, ri = lyap.delta, lyap.blend_inner_radius
    ok = r < r_max
    for edge in (1 + d, 1 + 2 * d):
        ok &= np.abs(ratio - edge) > gap
    for edge in (ri, 1.0):
        ok &= np.abs(r - edge) > gap
    # where the counter-terms are large log F varies too fast for a fixed step
    ok &= np.abs(arr[:, 3] - arr[:, 2]) > 1.0
    return np.flatnonzero(ok)


def certify_drift(
    params: ModelParams,
    lyap: LyapunovParams,
    plan: SamplingPlan | None = None,
    audit_fraction: float = 0.01,
) -> DriftReport:
    """Check ``LF <= phi(F)`` on a stratified sample and return the smallest admissible A.

    ``A_min`` is the sample maximum of ``LF (2 + log F) / F`` (clipped at 0).
    A finite-difference audit of ``LF / F`` runs on ``audit_fraction`` of the
    samples, drawn away from the cutoff kinks.
    """
    plan = plan or SamplingPlan()
    x, labels = sample_states(lyap, plan)
    margin, logF = drift_margin(params, lyap, x)
    if not np.all(np.isfinite(margin)):
        logger.warning("%d samples with non-finite drift margin", int(np.sum(~np.isfinite(margin))))
    m = np.where(np.isfinite(margin), margin, np.inf)
    i = int(np.argmax(m))
    sample_max = float(m[i])
    arr = x.as_array()
    radius = float(np.hypot(arr[i, 2], arr[i, 3]))
    # a bounded margin must not peak in the outermost shell of the sample
    edge = bool(radius >= 0.9 * plan.cap) or not np.isfinite(sample_max)
    if edge:
        logger.warning("worst drift margin at |p|=%.4g (cap %.4g); LF <= phi(F) may fail beyond the cap", radius, plan.cap)
    rng = np.random.default_rng(plan.seed + 1)
    pool = _audit_pool(lyap, arr)
    k = min(pool.size, max(1, int(audit_fraction * arr.shape[0])))
    rel = 0.0
    if k:
        idx = rng.choice(pool, size=k, replace=False)
        sub = State.from_array(arr[idx])
        an = LF_over_F(params, lyap, sub)[0]
        fd = fd_LF_over_F(params, lyap, sub)
        rel = float(np.max(np.abs(an - fd) / np.maximum(np.abs(an), 1.0)))
    by_region = {int(r): float(np.max(m[labels == r])) for r in np.unique(labels)}
    table = np.column_stack([arr, labels, logF, margin / lyap.A])
    return DriftReport(
        A_min=float(max(sample_max, 0.0)),
        sample_max=sample_max,
        worst_state=arr[i].copy(),
        worst_region=int(labels[i]),
        max_by_region=by_region,
        n_samples=int(arr.shape[0]),
        cap=plan.cap,
        edge_flag=edge,
        fd_audit_max_rel_error=rel,
        table=table,
    )


# ---------------------------------------------------------------------------
# averaging constants C1_hat, C2_hat


@dataclass
class LemmaConstants:
    C1_hat: float
    C2_hat: float
    n_samples: int
    argmax_C2_p2: float = float("nan")


def _lemma_quantities(params: ModelParams, lyap: LyapunovParams, x: State):
    val, (gq1, gq2, gp1, gp2), h11 = corrected_momentum_derivatives(params, x, "bar")
    g, T, bp = params.gamma, params.temperature, lyap.beta_plus
    w = params.potential.w(x.s)
    L_pbar = x.p1 * gq1 + x.p2 * gq2 + w * (gp1 - gp2) - g * x.p1 * gp1 + g * T * h11
    LE_over_E = bp * val * L_pbar + g * T * bp * (1 + bp * val**2) * gp1**2
    c1 = np.abs(val**2 - np.square(x.p2))
    c2 = np.square(x.p2) * LE_over_E
    return c1, c2


def estimate_lemma_constants(
    params: ModelParams, lyap: LyapunovParams, sample: State | None = None, plan: SamplingPlan | None = None, polish_top: int = 8
) -> LemmaConstants:
    """Empirical suprema of ``|pbar^2 - p2^2|`` and ``p2^2 L e^{b pbar^2/2} / e^{b pbar^2/2}`` on Omega_2 U Omega_3."""
    if sample is None:
        plan = plan or SamplingPlan()
        sample, _ = sample_states(lyap, plan, regions=(2, 3))
    labels = classify_array(sample.p1, sample.p2, lyap.delta)
    keep = labels >= 2
    arr = sample.as_array()[keep]
    x = State.from_array(arr)
    c1, c2 = _lemma_quantities(params, lyap, x)
    cap = float(np.max(np.abs(arr[:, 2:]))) if arr.size else 1.0

    def admissible(z):
        lab = classify_array(z[1], z[2], lyap.delta)
        return lab >= 2 and abs(z[2]) <= cap

    def quantity(which):
        def f(z):
            st = State(np.array([0.0]), np.array([z[0]]), np.array([z[1]]), np.array([z[2]]))
            return float(_lemma_quantities(params, lyap, st)[which][0])

        return f

    sup = []
    arg_p2 = float("nan")
    for which, vals in enumerate((c1, c2)):
        best = float(np.max(vals)) if vals.size else 0.0
        zb = None
        for j in np.argsort(vals)[::-1][:polish_top]:
            z0 = np.array([arr[j, 1] - arr[j, 0], arr[j, 2], arr[j, 3]])
            v, z = _polish(quantity(which), z0, admissible)
            if v > best:
                best, zb = v, z
        if which == 1:
            arg_p2 = float(abs(zb[2])) if zb is not None else float(abs(arr[int(np.argmax(vals)), 3]))
        sup.append(best)
    return LemmaConstants(sup[0], sup[1], int(arr.shape[0]), arg_p2)
