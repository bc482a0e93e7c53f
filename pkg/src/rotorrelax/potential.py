"""Zero-mean periodic interaction potential and its derivative/antiderivative ladder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PeriodicPotential:
    """Finite Fourier series ``W(s) = sum_k a_k cos(ks) + b_k sin(ks)``, ``k >= 1``.

    There is no constant mode, so ``W`` and both antiderivatives ``W1``
    (``W1' = W``) and ``W2`` (``W2' = W1``) integrate to zero over a period.

    Parameters
    ----------
    cosine_coeffs
        Amplitudes ``a_1, a_2, ...``.
    sine_coeffs
        Amplitudes ``b_1, b_2, ...``. Shorter list is zero-padded.
    """

    cosine_coeffs: tuple[float, ...] = (-1.0,)
    sine_coeffs: tuple[float, ...] = ()
    _a: np.ndarray = field(init=False, repr=False, compare=False)
    _b: np.ndarray = field(init=False, repr=False, compare=False)
    _k: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        a = np.asarray(self.cosine_coeffs, dtype=float).ravel()
        b = np.asarray(self.sine_coeffs, dtype=float).ravel()
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("potential coefficients must be finite")
        n = max(len(a), len(b), 1)
        a = np.pad(a, (0, n - len(a)))
        b = np.pad(b, (0, n - len(b)))
        object.__setattr__(self, "cosine_coeffs", tuple(float(v) for v in a))
        object.__setattr__(self, "sine_coeffs", tuple(float(v) for v in b))
        object.__setattr__(self, "_a", a)
        object.__setattr__(self, "_b", b)
        object.__setattr__(self, "_k", np.arange(1, n + 1, dtype=float))

    @classmethod
    def zero(cls) -> "PeriodicPotential":
        return cls((0.0,), (0.0,))

    @property
    def n_modes(self) -> int:
        return len(self._k)

    @property
    def is_zero(self) -> bool:
        return not (np.any(self._a) or np.any(self._b))

    @property
    def amplitude_bound(self) -> float:
        """Upper bound on ``max |W|``."""
        return float(np.sum(np.abs(self._a) + np.abs(self._b)))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Coefficient arrays ``(a, b)`` of equal length, for compiled kernels."""
        return self._a.copy(), self._b.copy()

    def _modes(self, s):
        s = np.asarray(s, dtype=float)
        ks = np.multiply.outer(np.mod(s, TWO_PI), self._k)
        return np.cos(ks), np.sin(ks)

    # d^n/ds^n of cos(ks), sin(ks) cycles with period 4; W1 and W2 are n = -1, -2.
    def _ladder(self, s, order: int):
        c, sn = self._modes(s)
        scale = self._k ** float(order)
        a, b = self._a * scale, self._b * scale
        r = order % 4
        if r == 0:
            out = c @ a + sn @ b
        elif r == 1:
            out = -sn @ a + c @ b
        elif r == 2:
            out = -c @ a - sn @ b
        else:
            out = sn @ a - c @ b
        return out if out.ndim else float(out)

    def W(self, s):
        return self._ladder(s, 0)

    def w(self, s):
        """Derivative ``W'``; the force on the first rotor is ``+w(q2 - q1)``."""
        return self._ladder(s, 1)

    def dw(self, s):
        return self._ladder(s, 2)

    def W1(self, s):
        return self._ladder(s, -1)

    def W2(self, s):
        return self._ladder(s, -2)

    def to_dict(self) -> dict:
        return {"cosine_coeffs": list(self.cosine_coeffs), "sine_coeffs": list(self.sine_coeffs)}


def eval_W(pot: PeriodicPotential, s):
    return pot.W(s)


def eval_w(pot: PeriodicPotential, s):
    return pot.w(s)


def eval_W1(pot: PeriodicPotential, s):
    return pot.W1(s)


def eval_W2(pot: PeriodicPotential, s):
    return pot.W2(s)
