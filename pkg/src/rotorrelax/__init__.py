"""Two-rotor Langevin lab: simulation, averaging, Lyapunov drift and relaxation experiments."""

from .dynamics import ModelParams, State, Trajectory, apply_generator, simulate, step
from .lyapunov import LyapunovParams, certify_drift
from .potential import PeriodicPotential

__all__ = [
    "ModelParams",
    "State",
    "Trajectory",
    "apply_generator",
    "simulate",
    "step",
    "LyapunovParams",
    "certify_drift",
    "PeriodicPotential",
]
