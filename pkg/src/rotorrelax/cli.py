"""Command-line entry point: ``rotorrelax <subcommand> [--config FILE] [--set section.key=value ...]``.

Every run writes ``manifest.json`` (config echo, seed, version, wall time, exit
code) to the output directory, also when the run fails. Exit codes: 0 success,
1 invalid input or failed self-test, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as cfgmod
from .averaging import DegenerateDenominatorError, order_chain
from .dynamics import SimulationError, TrajectoryRecorder, simulate, State
from .gibbs import GibbsMeasure, QuadratureError, check_nonintegrability, sample, mean_and_stderr, stationarity_check, tail_F
from .lyapunov import ParameterConstraintError, SamplingPlan, certify_drift
from .relaxation import FitError, escape_scaling, escape_time, fit_stretched_rate, tv_lower_bound

logger = logging.getLogger("rotorrelax")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class SelfTestFailure(RuntimeError):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_summary(path: Path, values: dict) -> Path:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={_fmt(v)}\n")
    return path


# ---------------------------------------------------------------------------
# subcommands; each returns the list of files written


def cmd_simulate(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    s = cfg.simulate
    rec = TrajectoryRecorder()
    res = simulate(
        cfg.model_params(), State.from_array(np.array(s.x0)), cfg.integrator.dt, s.n_steps, cfg.run.seed,
        observers=[rec], stride=s.stride, scheme=cfg.integrator.scheme, index=s.index,
    )
    return [
        write_csv(out / "trajectory.csv", rec.columns, rec.rows),
        write_summary(out / "simulate_summary.txt", {"t_end": res.t_end, "n_steps": res.n_steps, "rows": res.observed}),
    ]


def cmd_gibbs_sample(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    params = cfg.model_params()
    measure = GibbsMeasure(params)
    g = cfg.gibbs
    x = sample(measure, cfg.run.seed, g.n)
    cos_mean, cos_se = mean_and_stderr(np.cos(x.s))
    p1_mean, p1_se = mean_and_stderr(x.p1**2)
    summary = {
        "n": g.n,
        "log_Z": measure.log_Z,
        "E_cos_s": cos_mean, "E_cos_s_stderr": cos_se,
        "E_cos_s_quadrature": measure.angle_expectation(np.cos),
        "E_p1_sq": p1_mean, "E_p1_sq_stderr": p1_se,
    }
    for name, (m, se) in stationarity_check(measure, cfg.run.seed + 1, g.n).items():
        summary[f"E_L_{name}"] = m
        summary[f"E_L_{name}_stderr"] = se
    lyap = cfg.lyapunov_params()
    tails = [tail_F(measure, lyap, log_w=lw, n=g.tail_n, seed=cfg.run.seed + 2 + k) for k, lw in enumerate(g.tail_log_w)]
    return [
        write_csv(out / "gibbs_samples.csv", ("q1", "q2", "p1", "p2"), x.as_array()),
        write_summary(out / "gibbs_summary.txt", summary),
        write_csv(out / "tails.csv", ("log_w", "log_prob", "log_stderr"), [(t.log_w, t.log_prob, t.log_stderr) for t in tails]),
    ]


def cmd_order_check(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    o = cfg.order
    res = order_chain(cfg.model_params(), o.rays, tuple(o.P_values), o.n_angles, cfg.run.seed)
    rows, summary = [], {}
    for (kind, level, lam), est in res.items():
        for P, val, fit in est.rows():
            rows.append((kind, level, lam, P, val, fit))
        key = f"{kind}_{level}_ray{lam:+g}"
        summary[f"{key}_exponent"] = est.exponent
        summary[f"{key}_residual"] = est.residual
    return [
        write_csv(out / "order.csv", ("kind", "level", "ray", "P", "max_abs", "fitted"), rows),
        write_summary(out / "order_summary.txt", summary),
    ]


def cmd_drift_certify(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    d = cfg.drift
    params = cfg.model_params()
    plan = SamplingPlan(n=d.n, cap=d.cap, seed=cfg.run.seed)
    rep = certify_drift(params, cfg.lyapunov_params(), plan, d.audit_fraction)
    A = d.A if d.A > 0 else max(rep.A_min, 1e-300)
    table = rep.table.copy()
    table[:, 6] *= cfg.lyapunov_params().A / A
    summary = {
        "A_min": rep.A_min,
        "worst_margin": rep.sample_max,
        "worst_region": f"Omega{rep.worst_region}",
        "worst_state": " ".join(_fmt(v) for v in rep.worst_state),
        "n_samples": rep.n_samples,
        "cap": rep.cap,
        "edge_flag": int(rep.edge_flag),
        "fd_audit_max_rel_error": rep.fd_audit_max_rel_error,
        "A_used_for_phi": A,
    }
    for r, v in sorted(rep.max_by_region.items()):
        summary[f"max_margin_omega{r}"] = v
    rows = ((q1, q2, p1, p2, int(reg), lf, m) for q1, q2, p1, p2, reg, lf, m in table)
    return [
        write_csv(out / "certify.csv", ("q1", "q2", "p1", "p2", "region", "logF", "LF_over_phiF"), rows),
        write_summary(out / "drift_summary.txt", summary),
    ]


def cmd_nonintegrability(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    params = cfg.model_params()
    measure = GibbsMeasure(params)
    lyap = cfg.lyapunov_params()
    rows, summary = [], {"threshold": lyap.divergence_threshold}
    for eps in cfg.nonintegrability.epsilon:
        rep = check_nonintegrability(measure, lyap, eps, tuple(cfg.nonintegrability.R_grid))
        rows += [(eps, R, li, le) for R, li, le in rep.rows()]
        summary[f"eps{eps:g}_divergent"] = int(rep.divergent)
        summary[f"eps{eps:g}_growth_rate"] = rep.growth_rate
        summary[f"eps{eps:g}_expected_rate"] = rep.expected_rate
    return [
        write_csv(out / "nonintegrability.csv", ("epsilon", "R", "log_integral", "log_excess"), rows),
        write_summary(out / "nonintegrability_summary.txt", summary),
    ]


def cmd_tv_curve(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    tv = cfg.tv
    t_grid = [0.0] + [tv.t_min * 2.0**k for k in range(tv.n_doublings + 1)]
    curve = tv_lower_bound(
        cfg.model_params(), cfg.lyapunov_params(), np.array(tv.x0), t_grid, tv.n_traj, cfg.run.seed,
        dt=cfg.integrator.dt, n_boot=tv.n_boot, tail_samples=tv.tail_samples,
        scheme=cfg.integrator.scheme, workers=cfg.workers,
    )
    rows = zip(curve.t, curve.LB, curve.ci_lo, curve.ci_hi, curve.argmax_log_w, curve.LB_stderr)
    return [
        write_csv(out / "lb_curve.csv", ("t", "LB", "ci_lo", "ci_hi", "argmax_w", "stderr"), rows),
        write_csv(out / "pi_tail.csv", ("log_w", "est", "stderr"), zip(curve.log_w, curve.pi_tail, curve.pi_stderr)),
    ]


def cmd_escape_times(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    e = cfg.escape
    params = cfg.model_params()
    stats = [
        escape_time(params, P, e.energy_floor, e.n_traj, cfg.run.seed, cfg.integrator.dt, e.max_steps, cfg.workers)
        for P in e.P_values
    ]
    paths = [write_csv(out / "escape.csv", ("P", "mean_tau", "q10", "q50", "q90", "censored_frac"), [s.row() for s in stats])]
    if len(stats) >= 2 and all(s.mean_tau > 0 for s in stats):
        slope, icpt = escape_scaling(stats)
        paths.append(write_summary(out / "escape_summary.txt", {"slope": slope, "intercept": icpt}))
    return paths


def read_lb_curve(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FitError(f"{path} has no rows")
    t = np.array([float(r["t"]) for r in rows])
    LB = np.array([float(r["LB"]) for r in rows])
    if "stderr" in rows[0]:
        se = np.array([float(r["stderr"]) for r in rows])
    else:
        se = np.array([(float(r["ci_hi"]) - float(r["ci_lo"])) / 3.92 for r in rows])
    return t, LB, se


def cmd_rate_fit(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    src = Path(cfg.ratefit.input) if cfg.ratefit.input else out / "lb_curve.csv"
    if not src.exists():
        raise FileNotFoundError(f"no LB curve at {src}; run tv-curve first or set ratefit.input")
    t, LB, se = read_lb_curve(src)
    fit = fit_stretched_rate(t, LB, se, residual_threshold=cfg.ratefit.residual_threshold)
    summary = fit.summary()
    summary["alpha_quoted"] = int(fit.quoted_alpha is not None)
    return [write_summary(out / "ratefit.txt", summary)]


def cmd_selftest(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    from .selftest import run_selftest

    results = run_selftest(cfg)
    path = write_csv(out / "selftest.csv", ("check", "passed", "detail"), [(n, int(ok), d) for n, ok, d in results])
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        raise SelfTestFailure(f"{len(failed)} self-test check(s) failed: {', '.join(failed)}")
    return [path]


COMMANDS: dict[str, Callable[[cfgmod.ExperimentConfig, Path], list[Path]]] = {
    "simulate": cmd_simulate,
    "gibbs-sample": cmd_gibbs_sample,
    "order-check": cmd_order_check,
    "drift-certify": cmd_drift_certify,
    "nonintegrability": cmd_nonintegrability,
    "tv-curve": cmd_tv_curve,
    "escape-times": cmd_escape_times,
    "rate-fit": cmd_rate_fit,
    "selftest": cmd_selftest,
}

INVALID = (cfgmod.ConfigError, ParameterConstraintError, FitError, FileNotFoundError, SelfTestFailure)
NUMERICAL = (SimulationError, QuadratureError, DegenerateDenominatorError, FloatingPointError, ArithmeticError)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rotorrelax", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("-c", "--config", help="TOML config file")
    ap.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("-o", "--output-dir", help="overrides run.output_dir")
    ap.add_argument("--seed", type=int, help="overrides run.seed")
    ap.add_argument("--workers", type=int, help="overrides run.workers")
    ap.add_argument("--deterministic-order", action="store_true", help="single worker, stable reduction order")
    ap.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def run(command: str, config_path: str | None = None, overrides: list[str] = (), output_dir: str | None = None) -> int:
    """Run one subcommand; returns the exit code. The manifest is written on every path."""
    t0 = time.perf_counter()
    manifest: dict = {
        "command": command,
        "config_path": config_path,
        "overrides": list(overrides),
        "version": _version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    out = Path(output_dir or cfgmod.RunSection().output_dir)
    code = EXIT_OK
    try:
        cfg = cfgmod.load(config_path, list(overrides))
        if output_dir:
            cfg.run.output_dir = output_dir
        out = Path(cfg.run.output_dir)
        manifest["config"] = cfg.to_dict()
        manifest["seed"] = cfg.run.seed
        manifest["workers"] = cfg.workers
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[command](cfg, out)
        manifest["outputs"] = [p.name for p in written]
    except INVALID as exc:
        code = EXIT_INVALID
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    except NUMERICAL as exc:
        code = EXIT_NUMERICAL
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    except ValueError as exc:
        code = EXIT_INVALID
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    finally:
        manifest["exit_code"] = code
        manifest["wall_time_s"] = time.perf_counter() - t0
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    if "error" in manifest:
        print(f"error: {manifest['error']}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    if args.deterministic_order:
        overrides.append("run.deterministic_order=true")
    if args.print_config:
        try:
            print(cfgmod.dumps(cfgmod.load(args.config, overrides)))
        except cfgmod.ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        return EXIT_OK
    return run(args.command, args.config, overrides, args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
