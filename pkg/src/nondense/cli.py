"""Command line runner: one subcommand per experiment kind.

Exit codes: 0 all checks of the scenario passed, 1 a numerical check failed
or a numerical error was raised, 2 the scenario file is invalid (nothing is
written in that case).
"""

from __future__ import annotations

import argparse
import math
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .config import EXPERIMENTS, load
from .dichotomy import (
    admissibility_probe,
    bounded_solution,
    floquet_split,
    persistence_solve,
    spectral_split_autonomous,
    subspace_split,
    trial_battery,
    verify_dichotomy,
)
from .errors import ConfigError, NondenseError, NotContracting
from .evolution_family import (
    build_family,
    cocycle_residual,
    constant_perturbation,
    from_function,
    zero_perturbation,
)
from .operator_core import (
    LambdaSchedule,
    TimeGrid,
    descriptor_operator,
    lifted_operator,
    matrix_operator,
)
from .parabolic import (
    GRID,
    SPECTRAL,
    NonlocalBoundaryData,
    ParabolicOperator,
    boundary_perturbation,
    hille_yosida_rate,
    kernel_preset,
    run_dichotomy_scan,
)
from .report import run_id, write_csv, write_json
from .voc_solver import mild_residual, solve_ivp_direct, solve_ivp_resolvent

DEFAULT_OUT = {
    "trace": "trace.csv", "report": "report.json", "scan": "scan.csv",
    "summary": "summary.json", "rate": "rate.csv",
}


@dataclass
class Outcome:
    checks: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)      # key -> writer(path) or JSON dict
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


# ---------------------------------------------------------------------------
# building blocks from the config


def _mat(rows, name):
    a = np.asarray(rows, dtype=float)
    if a.ndim != 2:
        raise ConfigError(f"{name} must be a rectangular matrix")
    return a


def build_operator(cfg: dict):
    sec = cfg.get("operator", {"kind": "matrix", "matrix": [[-1.0]]})
    kind = sec["kind"]
    omega = sec.get("omega")
    if kind == "matrix":
        if "matrix" not in sec:
            raise ConfigError("operator.matrix is required for kind 'matrix'")
        return matrix_operator(_mat(sec["matrix"], "operator.matrix"), omega=omega), None
    if kind == "lifted":
        if "part" not in sec or "lift" not in sec:
            raise ConfigError("operator.part and operator.lift are required")
        return lifted_operator(_mat(sec["part"], "operator.part"),
                               _mat(sec["lift"], "operator.lift"), omega=omega), None
    if kind == "descriptor":
        if "descriptor" not in sec or "boundary_dim" not in sec:
            raise ConfigError("operator.descriptor and operator.boundary_dim are required")
        return descriptor_operator(_mat(sec["descriptor"], "operator.descriptor"),
                                   sec["boundary_dim"], omega=omega), None
    p_op = ParabolicOperator(p=sec.get("p", 2.0), N=sec.get("N", 16),
                             backend=GRID if sec.get("backend") == "grid" else SPECTRAL,
                             alpha=sec.get("alpha", 0.0))
    return p_op.model(), p_op


def build_kernels(cfg: dict) -> NonlocalBoundaryData:
    sec = cfg.get("kernel", {})
    common = {k: sec[k] for k in ("center", "width", "modulation", "frequency") if k in sec}
    b0 = kernel_preset(sec.get("beta0", "constant"), samples=sec.get("beta0_samples"),
                       **common)
    b1 = kernel_preset(sec.get("beta1", "zero"), samples=sec.get("beta1_samples"), **common)
    return NonlocalBoundaryData(b0, b1)


def build_perturbation(sec: Optional[dict], op, p_op, cfg: dict):
    if not sec or sec.get("kind", "zero") == "zero":
        return zero_perturbation(op)
    kind = sec["kind"]
    amp = sec.get("amplitude", 1.0)
    if kind == "nonlocal":
        if p_op is None:
            raise ConfigError("nonlocal perturbation needs operator.kind = 'parabolic'")
        return boundary_perturbation(p_op, op, build_kernels(cfg).scaled(amp))
    if "matrix" not in sec:
        raise ConfigError(f"{kind} perturbation needs a matrix")
    M = amp * _mat(sec["matrix"], "perturbation.matrix")
    if kind == "constant":
        return constant_perturbation(op, M)
    period = sec.get("period", 1.0)
    base = constant_perturbation(op, M).matrix(0.0)
    return from_function(op, lambda t: math.cos(2 * math.pi * t / period) * base,
                         period=period, name="periodic")


def build_forcing(cfg: dict, op) -> Callable:
    sec = cfg.get("forcing", {})
    kind = sec.get("kind", "zero")
    v = np.asarray(sec.get("value", np.zeros(op.x_dim)), dtype=float)
    if kind != "zero" and v.shape != (op.x_dim,):
        raise ConfigError(f"forcing.value must have length {op.x_dim}")
    if kind == "zero":
        z = np.zeros(op.x_dim)
        return lambda t: z
    if kind == "constant":
        return lambda t: v
    w = sec.get("frequency", 1.0)
    return lambda t: math.cos(w * t) * v


def build_grid(cfg: dict, default=(0.0, 1.0, 0.05)) -> TimeGrid:
    g = cfg.get("grid", {})
    return TimeGrid(g.get("t_start", default[0]), g.get("t_end", default[1]),
                    g.get("step", default[2]))


def build_window(cfg: dict, grid: TimeGrid) -> Optional[TimeGrid]:
    w = cfg.get("window")
    if not w or "t_start" not in w or "t_end" not in w:
        return None
    win = TimeGrid(w["t_start"], w["t_end"], grid.step)
    if grid.index(win.t_start) is None or grid.index(win.t_end) is None:
        raise ConfigError("window ends must be grid nodes")
    return win


def build_schedule(cfg: dict, op) -> LambdaSchedule:
    sec = cfg.get("lambda", {})
    sched = LambdaSchedule(sec.get("lambda_0", max(1e3, op.omega + 2.0)),
                           growth=sec.get("growth", 2.0),
                           max_terms=sec.get("max_terms", 8),
                           rel_tol=sec.get("rel_tol", 1e-6))
    sched.validate(op.omega)
    return sched


def _tol(cfg, key, default):
    return cfg.get("tolerances", {}).get(key, default)


def _split(cfg, table, op, pert, seed):
    sec = cfg.get("dichotomy", {})
    method = sec.get("method", "spectral")
    if method == "spectral":
        return spectral_split_autonomous(op, pert if not pert.is_zero else None)
    if method == "floquet":
        return floquet_split(table, sec.get("period", pert.period or table.grid.step))
    if "k_unstable" not in sec:
        raise ConfigError("dichotomy.k_unstable is required for the subspace method")
    return subspace_split(table, sec["k_unstable"], seed=seed)


# ---------------------------------------------------------------------------
# experiments: each returns a prepared runner so that setup errors surface
# before any file is written


def prep_solve(cfg, seed):
    op, p_op = build_operator(cfg)
    pert = build_perturbation(cfg.get("perturbation"), op, p_op, cfg)
    f = build_forcing(cfg, op)
    grid = build_grid(cfg)
    x0 = np.asarray(cfg.get("initial", {}).get("x0", np.zeros(op.state_dim)), dtype=float)
    op.check_x0(x0)
    route = cfg.get("solve", {}).get("route", "resolvent")
    sched = build_schedule(cfg, op) if route == "resolvent" else None
    res_tol = _tol(cfg, "residual", 1e-6)
    coc_tol = _tol(cfg, "cocycle", 1e-8)

    def run() -> Outcome:
        table = build_family(op, pert, grid, mode="compressed")
        if route == "resolvent":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                trace = solve_ivp_resolvent(op, pert, f, grid.t_start, x0, grid, sched,
                                            table=table)
        else:
            trace = solve_ivp_direct(op, pert, f, grid.t_start, x0, grid, table=table)
        out = Outcome()
        if op.a_action is not None:
            trace.mild_residual = mild_residual(op, pert, f, trace)
            out.checks["mild_residual"] = float(np.max(trace.mild_residual)) <= res_tol
        coc = cocycle_residual(table, n_triples=200, off_node=10, seed=seed)
        out.checks["cocycle"] = coc <= coc_tol
        out.details = {"final_value": trace.values[-1], "cocycle_residual": coc,
                       "lambda_uniformity": trace.uniformity, "accepted": trace.accepted}
        if trace.mild_residual is not None:
            out.details["max_mild_residual"] = float(np.max(trace.mild_residual))
        out.files["trace"] = trace.to_csv
        return out
    return run


def prep_dichotomy(cfg, seed):
    op, p_op = build_operator(cfg)
    pert = build_perturbation(cfg.get("perturbation"), op, p_op, cfg)
    grid = build_grid(cfg, (-25.0, 25.0, 0.05))
    window = build_window(cfg, grid)
    ver_tol = _tol(cfg, "verify", 1e-8)
    eta = cfg.get("dichotomy", {}).get("eta", 0.0)
    f = build_forcing(cfg, op) if "forcing" in cfg else None
    sched = build_schedule(cfg, op) if f is not None and window is not None else None

    def run() -> Outcome:
        table = build_family(op, pert, grid, mode="compressed")
        split = _split(cfg, table, op, pert, seed)
        report = verify_dichotomy(table, split, tol=ver_tol)
        out = Outcome(checks={"verify": report.passed})
        out.details = {"verification": _report_dict(report)}
        if sched is not None:
            trace = bounded_solution(table, split, op, f, window, sched, eta=eta,
                                     tol=_tol(cfg, "bounded", 1e-6), limit="exact")
            out.checks["weighted_bound"] = bool(trace.info["bound_ok"])
            if op.a_action is not None:
                r = mild_residual(op, pert, f, trace)
                n = len(r)
                trace.mild_residual = r
                out.checks["mild_residual"] = float(np.max(r[n // 4: n - n // 4])) <= \
                    _tol(cfg, "residual", 1e-6)
            out.details["bounded"] = {k: v for k, v in trace.info.items()
                                      if isinstance(v, (int, float, bool))}
            out.files["trace"] = trace.to_csv
        out.files["report"] = out.details["verification"]
        return out
    return run


def prep_admissibility(cfg, seed):
    op, p_op = build_operator(cfg)
    pert = build_perturbation(cfg.get("perturbation"), op, p_op, cfg)
    grid = build_grid(cfg, (-20.0, 20.0, 0.1))
    sec = cfg.get("admissibility", {})
    n = sec.get("n_trials", 10)
    expect = sec.get("expect", "UNIQUE-SOLVABLE")

    def run() -> Outcome:
        trials = trial_battery(op, n=n, seed=seed)
        v = admissibility_probe(op, pert, grid, None, trials)
        rep = {"verdict": v.verdict, "expected": expect, "center_mass": v.center_mass,
               "residuals": v.residuals, "consistency": v.consistency,
               "diagnosis": v.diagnosis, "n_trials": n}
        out = Outcome(checks={"verdict": v.verdict == expect}, details={"admissibility": rep})
        out.files["report"] = rep
        return out
    return run


def prep_persistence(cfg, seed):
    op, p_op = build_operator(cfg)
    B = build_perturbation(cfg.get("perturbation"), op, p_op, cfg)
    if "target" not in cfg:
        raise ConfigError("persistence needs a target section (the perturbed family C)")
    C = build_perturbation(cfg["target"], op, p_op, cfg)
    grid = build_grid(cfg, (-20.0, 20.0, 0.1))
    window = build_window(cfg, grid)
    if window is None:
        raise ConfigError("persistence needs window.t_start and window.t_end")
    ver_tol = _tol(cfg, "verify", 1e-6)

    def run() -> Outcome:
        table_B = build_family(op, B, grid, mode="compressed")
        split_B = _split(cfg, table_B, op, B, seed)
        out = Outcome()
        try:
            res = persistence_solve(op, B, C, split_B, table_B, window,
                                    verify_tol=ver_tol, seed=seed)
        except NotContracting as exc:
            out.checks["contraction"] = False
            out.details["persistence"] = {"q": exc.q, "status": "not-certified",
                                          "message": str(exc)}
        else:
            out.checks["contraction"] = res.q < 1.0
            out.checks["verify"] = res.passed
            out.details["persistence"] = {
                "q": res.q, "epsilon": res.epsilon, "chat": res.chat, "nu": res.nu,
                "tau": res.tau, "uniqueness_gap": res.uniqueness_gap,
                "cross_check": res.cross_check, "status": "certified" if res.passed
                else "failed", "verification": _report_dict(res.report)}
        out.files["report"] = out.details["persistence"]
        return out
    return run


def prep_rate(cfg, seed):
    sec = cfg.get("rate", {})
    ps = sec.get("p_values", [cfg.get("operator", {}).get("p", 2.0)])
    lams = np.geomspace(sec.get("lambda_min", 1e4), sec.get("lambda_max", 1e8),
                        sec.get("count", 9))
    alpha = cfg.get("operator", {}).get("alpha", 0.0)
    if not lams[0] > alpha:
        raise ConfigError("rate.lambda_min must exceed operator.alpha")
    ops = [ParabolicOperator(p=p, N=16, alpha=alpha) for p in ps]
    e_tol = _tol(cfg, "rate_exponent", 0.02)
    c_tol = _tol(cfg, "rate_constant", 0.05)

    def run() -> Outcome:
        out = Outcome()
        rows = []
        for p_op in ops:
            fit = hille_yosida_rate(p_op, lams)
            p = p_op.p
            e_ref, c_ref = (p + 1) / (2 * p), (1 / p) ** (1 / p)
            rows.append([p, fit.exponent, fit.constant, e_ref, c_ref])
            out.checks[f"exponent_p{p:g}"] = abs(fit.exponent / e_ref - 1) <= e_tol
            out.checks[f"constant_p{p:g}"] = abs(fit.constant / c_ref - 1) <= c_tol
        out.details["rate"] = [dict(zip(["p", "exponent", "constant", "expected_exponent",
                                         "expected_constant"], r)) for r in rows]
        out.files["rate"] = lambda path: write_csv(
            path, ["p", "exponent", "constant", "expected_exponent", "expected_constant"],
            rows)
        return out
    return run


def prep_scan(cfg, seed):
    sec = dict(cfg.get("operator", {}))
    sec.setdefault("kind", "parabolic")
    if sec["kind"] != "parabolic":
        raise ConfigError("example-scan needs operator.kind = 'parabolic'")
    _, p_op = build_operator({**cfg, "operator": {**sec, "alpha": sec.get("alpha", 1.0)}})
    p_op.check_gap()
    data = build_kernels(cfg)
    amps = cfg.get("scan", {}).get("amplitudes", [0.0, 1e-3, 1e-2])
    w = cfg.get("window", {})
    step = cfg.get("grid", {}).get("step", 0.1)
    window = TimeGrid(w.get("t_start", 0.0), w.get("t_end", 4.0), step)
    margin = w.get("margin")
    ver_tol = _tol(cfg, "verify", 1e-6)

    def run() -> Outcome:
        rep = run_dichotomy_scan(p_op, data, amps, window, margin=margin,
                                 verify_tol=ver_tol, seed=seed)
        certified = [r for r in rep.rows if r.status != "not-certified"]
        out = Outcome(checks={
            "agreement": rep.agreement,
            "certified_rows_pass": all(r.passed for r in certified),
        }, details={"scan": rep.summary()})
        out.files["scan"] = rep.to_csv
        return out
    return run


PREPARE = {
    "solve": prep_solve, "dichotomy": prep_dichotomy, "admissibility": prep_admissibility,
    "persistence": prep_persistence, "example-rate": prep_rate, "example-scan": prep_scan,
}


def _report_dict(report) -> dict:
    return {"residuals": report.residuals, "kappa": report.kappa, "beta": report.beta,
            "kappa_fit": report.kappa_fit, "beta_fit": report.beta_fit, "tol": report.tol,
            "pass": report.passed, "failed": report.failed}


# ---------------------------------------------------------------------------
# orchestration


def run_scenario(cfg: dict, experiment: str, out_dir, seed: int = 0,
                 threads: Optional[int] = None) -> int:
    """Run one experiment; returns the exit code."""
    if cfg.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {cfg['experiment']!r}, not {experiment!r}")
    try:
        run = PREPARE[experiment](cfg, seed)
    except (ValueError, NondenseError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    out_dir = Path(out_dir)
    names = {**DEFAULT_OUT, **cfg.get("output", {})}
    rid = run_id({"config": cfg, "experiment": experiment, "seed": seed})
    t0 = time.perf_counter()
    error = None
    with threadpool_limits(limits=threads):
        try:
            outcome = run()
        except (NondenseError, ValueError) as exc:
            outcome = Outcome(checks={"completed": False})
            error = f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - t0

    written = {}
    for key, writer in outcome.files.items():
        path = out_dir / names[key]
        if isinstance(writer, dict):
            write_json(path, {**writer, "run_id": rid})
        else:
            writer(path)
        written[key] = path.name
    summary = {
        "run_id": rid,
        "experiment": experiment,
        "seed": seed,
        "config": cfg,
        "versions": {"nondense": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "wall_time_s": wall,
        "passed": outcome.passed,
        "checks": outcome.checks,
        "failed_checks": [k for k, v in outcome.checks.items() if not v],
        "error": error,
        "artifacts": written,
        "details": outcome.details,
    }
    write_json(out_dir / names["summary"], summary)
    return 0 if outcome.passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nondense",
                                 description="Evolution families and dichotomies for "
                                             "non-densely defined operators.")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="scenario file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS threads")
        sp.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config)
        return run_scenario(cfg, args.experiment, args.out, seed=args.seed,
                            threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
