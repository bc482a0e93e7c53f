"""Experiment configuration: TOML file with one table per module plus dotted CLI overrides."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynamics import ModelParams, default_workers
from .lyapunov import LyapunovParams, ParameterConstraintError
from .potential import PeriodicPotential


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending dotted key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ModelSection:
    gamma: float = 1.0
    temperature: float = 1.0
    cosine_coeffs: list[float] = field(default_factory=lambda: [-1.0])
    sine_coeffs: list[float] = field(default_factory=list)


@dataclass
class LyapunovSection:
    beta_minus: float = 0.9
    beta_plus: float = 1.1
    delta: float = 0.5
    blend_inner_radius: float = 0.75


@dataclass
class IntegratorSection:
    dt: float = 1e-3
    scheme: str = "splitting"  # or "euler"


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "out"
    workers: int = 0  # 0 = all available cores
    deterministic_order: bool = False


@dataclass
class SimulateSection:
    x0: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 30.0])
    n_steps: int = 10_000
    stride: int = 100
    index: int = 0


@dataclass
class GibbsSection:
    n: int = 100_000
    tail_log_w: list[float] = field(default_factory=lambda: [1.0, 3.0, 10.0, 1e7, 1e8])
    tail_n: int = 100_000


@dataclass
class OrderSection:
    P_values: list[float] = field(default_factory=lambda: [2.0**k for k in range(4, 13)])
    rays: list[float] = field(default_factory=lambda: [0.0, 0.3, -0.3, 0.4, -0.4])
    n_angles: int = 256


@dataclass
class DriftSection:
    n: int = 100_000
    cap: float = 1000.0
    audit_fraction: float = 0.01
    A: float = 0.0  # 0 = use the certified A_min for phi


@dataclass
class NonintegrabilitySection:
    epsilon: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.3, 0.5])
    R_grid: list[float] = field(default_factory=lambda: [2.0, 4.0, 8.0, 12.0, 16.0, 24.0, 32.0])


@dataclass
class TvSection:
    x0: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 30.0])
    t_min: float = 1.0
    n_doublings: int = 17
    n_traj: int = 1000
    n_boot: int = 200
    tail_samples: int = 40_000


@dataclass
class EscapeSection:
    P_values: list[float] = field(default_factory=lambda: [8.0, 16.0, 32.0, 64.0])
    energy_floor: float = 3.0
    n_traj: int = 1000
    max_steps: int = 10**9


@dataclass
class RateFitSection:
    input: str = ""  # lb_curve.csv; empty = <output_dir>/lb_curve.csv
    residual_threshold: float = 0.1


SECTIONS: dict[str, type] = {
    "model": ModelSection,
    "lyapunov": LyapunovSection,
    "integrator": IntegratorSection,
    "run": RunSection,
    "simulate": SimulateSection,
    "gibbs": GibbsSection,
    "order": OrderSection,
    "drift": DriftSection,
    "nonintegrability": NonintegrabilitySection,
    "tv": TvSection,
    "escape": EscapeSection,
    "ratefit": RateFitSection,
}


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    lyapunov: LyapunovSection = field(default_factory=LyapunovSection)
    integrator: IntegratorSection = field(default_factory=IntegratorSection)
    run: RunSection = field(default_factory=RunSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    gibbs: GibbsSection = field(default_factory=GibbsSection)
    order: OrderSection = field(default_factory=OrderSection)
    drift: DriftSection = field(default_factory=DriftSection)
    nonintegrability: NonintegrabilitySection = field(default_factory=NonintegrabilitySection)
    tv: TvSection = field(default_factory=TvSection)
    escape: EscapeSection = field(default_factory=EscapeSection)
    ratefit: RateFitSection = field(default_factory=RateFitSection)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return dataclasses.asdict(self)

    def model_params(self) -> ModelParams:
        m = self.model
        pot = PeriodicPotential(tuple(m.cosine_coeffs), tuple(m.sine_coeffs))
        return ModelParams(gamma=m.gamma, temperature=m.temperature, potential=pot)

    def lyapunov_params(self, A: float = 1.0) -> LyapunovParams:
        ly = self.lyapunov
        return LyapunovParams(
            beta_minus=ly.beta_minus,
            beta_plus=ly.beta_plus,
            delta=ly.delta,
            A=A,
            temperature=self.model.temperature,
            blend_inner_radius=ly.blend_inner_radius,
        )

    @property
    def workers(self) -> int:
        if self.run.deterministic_order:
            return 1
        return self.run.workers or default_workers()


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(name, f"expected a list of numbers, got {value!r}")
        return [float(v) for v in value]
    return value


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config; unknown sections or keys are rejected."""
    cfg = ExperimentConfig()
    for sec_name, values in data.items():
        if sec_name not in SECTIONS:
            raise ConfigError(sec_name, f"unknown section (known: {', '.join(SECTIONS)})")
        if not isinstance(values, dict):
            raise ConfigError(sec_name, "expected a table")
        section = getattr(cfg, sec_name)
        known = {f.name for f in dataclasses.fields(section)}
        for key, value in values.items():
            name = f"{sec_name}.{key}"
            if key not in known:
                raise ConfigError(name, "unknown key")
            setattr(section, key, _coerce(name, value, getattr(section, key)))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        params = cfg.model_params()
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None
    if not cfg.integrator.dt > 0:
        raise ConfigError("integrator.dt", "must be positive")
    if cfg.integrator.scheme not in ("splitting", "euler"):
        raise ConfigError("integrator.scheme", "must be 'splitting' or 'euler'")
    if cfg.run.workers < 0:
        raise ConfigError("run.workers", "must be >= 0")
    try:
        cfg.lyapunov_params().check_model(params)
    except ParameterConstraintError as exc:
        raise ConfigError("lyapunov", str(exc)) from None
    for name in ("simulate.x0", "tv.x0"):
        sec, key = name.split(".")
        if len(getattr(getattr(cfg, sec), key)) != 4:
            raise ConfigError(name, "expected four numbers (q1, q2, p1, p2)")


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value`` with ``value`` in TOML syntax (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(path, "override path must be section.key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return parts[0], parts[1], value


def load(path: str | Path | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"not valid TOML: {exc}") from None
        except OSError as exc:
            raise ConfigError(str(path), str(exc)) from None
    for text in overrides:
        sec, key, value = parse_override(text)
        data.setdefault(sec, {})[key] = value
    return from_dict(data)


def dumps(cfg: ExperimentConfig) -> str:
    """TOML rendering of the full config (for the manifest and ``--print-config``)."""
    lines = []
    for sec, values in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for key, value in values.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
