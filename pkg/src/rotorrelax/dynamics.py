"""Two-rotor Langevin system: Hamiltonian, generator, integrators and simulation.

Phase point ``x = (q1, q2, p1, p2)``. Only the first rotor is attached to the
heat bath; the second one feels the first through ``W(q2 - q1)``::

    dq_i = p_i dt
    dp1  = w(q2 - q1) dt - gamma p1 dt + sqrt(2 gamma T) dB
    dp2  = -w(q2 - q1) dt
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .potential import TWO_PI, PeriodicPotential

logger = logging.getLogger(__name__)

DEFAULT_DT = 1e-3
NOISE_BLOCK = 1 << 16


class SimulationError(FloatingPointError):
    """A trajectory produced a non-finite state."""

    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class ModelParams:
    gamma: float = 1.0
    temperature: float = 1.0
    potential: PeriodicPotential = field(default_factory=PeriodicPotential)

    def __post_init__(self):
        # gamma = 0 is the closed Hamiltonian system (no bath)
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    @property
    def noise_scale(self) -> float:
        return float(np.sqrt(2.0 * self.gamma * self.temperature))


@dataclass(frozen=True)
class State:
    """Phase point; fields may be scalars or equally shaped arrays (an ensemble)."""

    q1: float | np.ndarray
    q2: float | np.ndarray
    p1: float | np.ndarray
    p2: float | np.ndarray

    def __post_init__(self):
        for name in ("q1", "q2"):
            v = getattr(self, name)
            object.__setattr__(self, name, _wrap(v))

    @classmethod
    def from_array(cls, x) -> "State":
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 4:
            raise ValueError("state array must have trailing dimension 4")
        if x.ndim == 1:
            return cls(*(float(v) for v in x))
        return cls(x[..., 0], x[..., 1], x[..., 2], x[..., 3])

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(self.q1, self.q2, self.p1, self.p2), axis=-1).astype(float)

    @property
    def s(self):
        """Relative angle ``q2 - q1`` reduced to [0, 2pi)."""
        return _wrap(np.subtract(self.q2, self.q1))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))

    def __len__(self):
        return int(np.size(self.p1))


def _wrap(q):
    r = np.mod(q, TWO_PI)
    # mod can round up to exactly 2pi for tiny negative inputs
    r = np.where(r >= TWO_PI, 0.0, r)
    return float(r) if np.ndim(r) == 0 else r


@dataclass(frozen=True)
class Observable:
    """A function fed to the generator, with its first derivatives and d^2/dp1^2.

    ``gradient`` returns ``(d/dq1, d/dq2, d/dp1, d/dp2)``.
    """

    value: Callable[[State], np.ndarray]
    gradient: Callable[[State], tuple]
    p1_second_derivative: Callable[[State], np.ndarray]
    name: str = "f"

    @classmethod
    def from_function(cls, fn: Callable[[State], np.ndarray], h: float = 1e-4, name: str = "f") -> "Observable":
        """Central finite-difference fallback for functions without analytic derivatives."""

        def shifted(x, i, d):
            a = x.as_array().copy()
            a[..., i] += d
            return State.from_array(a)

        def grad(x):
            return tuple((fn(shifted(x, i, h)) - fn(shifted(x, i, -h))) / (2 * h) for i in range(4))

        def d2(x):
            return (fn(shifted(x, 2, h)) - 2 * fn(x) + fn(shifted(x, 2, -h))) / h**2

        return cls(fn, grad, d2, name=name)


def hamiltonian(params: ModelParams, x: State):
    return 0.5 * (np.square(x.p1) + np.square(x.p2)) + params.potential.W(x.s)


def hamiltonian_observable(params: ModelParams) -> Observable:
    pot = params.potential

    def grad(x):
        w = pot.w(x.s)
        return (-w, w, np.asarray(x.p1, float), np.asarray(x.p2, float))

    return Observable(
        lambda x: hamiltonian(params, x),
        grad,
        lambda x: np.ones_like(np.asarray(x.p1, float)),
        name="H",
    )


def exp_hamiltonian_observable(params: ModelParams, beta: float) -> Observable:
    """``exp(beta H)``."""
    pot = params.potential

    def value(x):
        return np.exp(beta * hamiltonian(params, x))

    def grad(x):
        e = value(x)
        w = pot.w(x.s)
        return (-beta * w * e, beta * w * e, beta * x.p1 * e, beta * x.p2 * e)

    def d2(x):
        return beta * (1.0 + beta * np.square(x.p1)) * value(x)

    return Observable(value, grad, d2, name=f"exp({beta}H)")


def apply_generator(params: ModelParams, f: Observable, x: State):
    """``Lf(x) = p1 f_q1 + p2 f_q2 + w (f_p1 - f_p2) - gamma p1 f_p1 + gamma T f_p1p1``."""
    gq1, gq2, gp1, gp2 = f.gradient(x)
    d2 = f.p1_second_derivative(x)
    for part in (gq1, gq2, gp1, gp2, d2):
        if not np.all(np.isfinite(part)):
            raise FloatingPointError(f"non-finite derivative of {f.name}")
    w = params.potential.w(x.s)
    g, T = params.gamma, params.temperature
    return x.p1 * gq1 + x.p2 * gq2 + w * (gp1 - gp2) - g * x.p1 * gp1 + g * T * d2


# ---------------------------------------------------------------------------
# integrators


def _ou_coefficients(params: ModelParams, dt: float) -> tuple[float, float]:
    decay = np.exp(-params.gamma * dt)
    # exact OU variance; reduces to 2 gamma T dt as dt -> 0
    sd = np.sqrt(params.temperature * -np.expm1(-2.0 * params.gamma * dt))
    return float(decay), float(sd)


def step(params: ModelParams, x: State, dt: float, noise) -> State:
    """One B-A-O-A-B splitting step: Hamiltonian half steps around an exact OU update of p1.

    ``noise`` is standard normal (scalar or one per ensemble member).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    pot = params.potential
    decay, sd = _ou_coefficients(params, dt)
    h = 0.5 * dt
    q1, q2, p1, p2 = x.q1, x.q2, x.p1, x.p2
    f = pot.w(np.subtract(q2, q1))
    p1 = p1 + h * f
    p2 = p2 - h * f
    q1 = q1 + h * p1
    q2 = q2 + h * p2
    p1 = decay * p1 + sd * np.asarray(noise, float)
    q1 = q1 + h * p1
    q2 = q2 + h * p2
    f = pot.w(np.subtract(q2, q1))
    p1 = p1 + h * f
    p2 = p2 - h * f
    out = State(q1, q2, p1, p2)
    if not out.is_finite():
        raise SimulationError("non-finite state after step")
    return out


def step_euler_maruyama(params: ModelParams, x: State, dt: float, noise) -> State:
    if not dt > 0:
        raise ValueError("dt must be positive")
    f = params.potential.w(x.s)
    p1 = x.p1 + (f - params.gamma * x.p1) * dt + np.sqrt(2 * params.gamma * params.temperature * dt) * np.asarray(noise, float)
    out = State(x.q1 + x.p1 * dt, x.q2 + x.p2 * dt, p1, x.p2 - f * dt)
    if not out.is_finite():
        raise SimulationError("non-finite state after step")
    return out


STEPPERS = {"splitting": step, "euler": step_euler_maruyama}


@njit(cache=True)
def _force(s, a, b):
    out = 0.0
    for j in range(a.shape[0]):
        k = j + 1.0
        if a[j] != 0.0:
            out -= k * a[j] * np.sin(k * s)
        if b[j] != 0.0:
            out += k * b[j] * np.cos(k * s)
    return out


@njit(cache=True, nogil=True)
def _advance(x, noise, n, dt, gamma, temp, a, b, scheme, floor):
    """Advance ``x`` (length-4, in place) by up to ``n`` steps.

    Returns the number of steps taken; stops early when ``|p2| <= floor`` or
    when the state becomes non-finite (then the return value is ``-(k + 1)``).
    """
    tp = 2.0 * np.pi
    q1, q2, p1, p2 = x[0], x[1], x[2], x[3]
    h = 0.5 * dt
    decay = np.exp(-gamma * dt)
    sd = np.sqrt(temp * -np.expm1(-2.0 * gamma * dt))
    em_sd = np.sqrt(2.0 * gamma * temp * dt)
    f = _force(q2 - q1, a, b)
    for k in range(n):
        if scheme == 0:
            p1 += h * f
            p2 -= h * f
            q1 += h * p1
            q2 += h * p2
            p1 = decay * p1 + sd * noise[k]
            q1 += h * p1
            q2 += h * p2
            f = _force(q2 - q1, a, b)
            p1 += h * f
            p2 -= h * f
        else:
            q1 += p1 * dt
            q2 += p2 * dt
            p1 += (f - gamma * p1) * dt + em_sd * noise[k]
            p2 -= f * dt
            f = _force(q2 - q1, a, b)
        q1 -= tp * np.floor(q1 / tp)
        q2 -= tp * np.floor(q2 / tp)
        if not (np.isfinite(p1) and np.isfinite(p2) and np.isfinite(q1) and np.isfinite(q2)):
            x[0], x[1], x[2], x[3] = q1, q2, p1, p2
            return -(k + 1)
        if abs(p2) <= floor:
            x[0], x[1], x[2], x[3] = q1, q2, p1, p2
            return k + 1
    x[0], x[1], x[2], x[3] = q1, q2, p1, p2
    return n


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for trajectory ``index`` under master ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def _scheme_code(scheme: str) -> int:
    try:
        return {"splitting": 0, "euler": 1}[scheme]
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}; use 'splitting' or 'euler'") from None


class Trajectory:
    """Single trajectory driven by its own counter-based noise stream.

    Advancing is deterministic given ``(params, x0, dt, seed, index)`` and
    independent of how the total step count is split into calls.
    """

    def __init__(self, params: ModelParams, x0, dt: float, seed: int, index: int = 0, scheme: str = "splitting"):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.params = params
        self.dt = float(dt)
        self.scheme = scheme
        self._code = _scheme_code(scheme)
        self._a, self._b = params.potential.arrays()
        self.x = (x0.as_array() if isinstance(x0, State) else np.asarray(x0, dtype=float)).copy()
        self.x[:2] = np.mod(self.x[:2], TWO_PI)
        self.rng = trajectory_rng(seed, index)
        self.steps = 0
        self._buf = np.empty(0)
        self._pos = 0

    @property
    def time(self) -> float:
        return self.steps * self.dt

    @property
    def state(self) -> State:
        return State.from_array(self.x)

    def _noise(self, n):
        if self._pos >= len(self._buf):
            # the generator is a single stream, so block sizes do not change the path
            self._buf = self.rng.standard_normal(min(n, NOISE_BLOCK))
            self._pos = 0
        m = min(n, len(self._buf) - self._pos)
        return self._buf[self._pos : self._pos + m]

    def advance(self, n_steps: int, floor: float = -1.0) -> int:
        """Take ``n_steps`` steps (fewer if ``|p2|`` reaches ``floor``); returns steps taken."""
        p = self.params
        done = 0
        while done < n_steps:
            chunk = self._noise(n_steps - done)
            k = _advance(self.x, chunk, len(chunk), self.dt, p.gamma, p.temperature, self._a, self._b, self._code, floor)
            if k < 0:
                self.steps += -k
                raise SimulationError(
                    f"non-finite state {self.x.tolist()} at t={self.time:.6g}", time=self.time
                )
            self._pos += k
            self.steps += k
            done += k
            if k < len(chunk):
                break
        return done


@dataclass
class TrajectorySummary:
    t_end: float
    n_steps: int
    final: State
    observed: int


def simulate(
    params: ModelParams,
    x0: State,
    dt: float,
    n_steps: int,
    seed: int,
    observers: Sequence[Callable[[float, State], None]] = (),
    stride: int = 1,
    scheme: str = "splitting",
    index: int = 0,
) -> TrajectorySummary:
    """Run one trajectory, calling each observer with ``(t, state)`` every ``stride`` steps (and at t=0)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    traj = Trajectory(params, x0, dt, seed, index=index, scheme=scheme)
    calls = 0

    def notify():
        nonlocal calls
        st = traj.state
        for obs in observers:
            obs(traj.time, st)
        calls += 1

    notify()
    remaining = int(n_steps)
    while remaining > 0:
        k = min(stride, remaining)
        traj.advance(k)
        remaining -= k
        if traj.steps % stride == 0:
            notify()
    return TrajectorySummary(traj.time, traj.steps, traj.state, calls)


class TrajectoryRecorder:
    """Observer collecting ``t, q1, q2, p1, p2`` rows."""

    columns = ("t", "q1", "q2", "p1", "p2")

    def __init__(self):
        self.rows: list[tuple[float, ...]] = []

    def __call__(self, t: float, x: State):
        self.rows.append((t, x.q1, x.q2, x.p1, x.p2))

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, 5)


def default_workers() -> int:
    return os.cpu_count() or 1


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """``[fn(item) for item in items]`` on a thread pool; output order follows ``items``.

    Each trajectory owns its noise stream, so results do not depend on scheduling.
    """
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def evolve_ensemble(trajectories: Sequence[Trajectory], n_steps: int, workers: int | None = 1) -> np.ndarray:
    """Advance each trajectory by ``n_steps``; returns the stacked states."""
    parallel_map(lambda tr: tr.advance(n_steps), trajectories, workers)
    return np.array([tr.x.copy() for tr in trajectories]).reshape(-1, 4)


def make_ensemble(params: ModelParams, x0, n_traj: int, dt: float, seed: int, scheme: str = "splitting") -> list[Trajectory]:
    """``n_traj`` trajectories from the same (or per-member, shape ``(n, 4)``) initial state."""
    x0 = np.asarray(x0.as_array() if isinstance(x0, State) else x0, dtype=float)
    starts = np.broadcast_to(x0, (n_traj, 4))
    return [Trajectory(params, starts[i], dt, seed, index=i, scheme=scheme) for i in range(n_traj)]
