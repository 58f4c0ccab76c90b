"""Command-line front end: solve, eoc, verify, simulate, audit.

Exit codes: 0 success, 2 usage or configuration error, 3 solver
precondition failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .analysis import (artifact_name, default_control_count, error_surface, halving_steps,
                       lemma1_study, lemma2_study, refinement_study, verify_dpp, write_divergence_csv,
                       write_eoc_csv, write_error_surface_csv, write_gap_csv)
from .cost import DiscountError, check_discount, discount_weight_gap, theta
from .dynamics import TimeGrid, write_trajectory_csv
from .grid import OutOfDomainError, build_grid, make_grid
from .problem import (BUILTINS, ControlSignal, builtin, hypothesis_audit, problem_from_config,
                      sample_control_grid)
from .solver import EnumerationBudgetError, closed_loop_simulate, solve, write_value_csv

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_VERIFY = 0, 2, 3, 4


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    problem: str = "test1"
    dt: float = 0.1
    dx: float | None = None  # defaults to dt
    controls: int | None = None  # defaults to the domain node count along x_1
    boundary: str = "clamp"
    norm: str = "absolute"
    out: str = "out"
    seed: int = 0
    budget: int = 10**6

    def validate(self):
        if self.dx is None:
            self.dx = self.dt
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not (self.dx > 0 and math.isfinite(self.dx)):
            raise ConfigError(f"dx must be positive, got {self.dx}")
        if self.controls is not None and self.controls < 1:
            raise ConfigError("controls must be >= 1")
        if self.boundary not in ("clamp", "error"):
            raise ConfigError(f"unknown boundary policy {self.boundary!r}")
        if self.norm not in ("absolute", "relative"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")


_CASTS = {"dt": float, "dx": float, "controls": int, "seed": int, "budget": int}


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{num}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def _run_config(args) -> tuple[RunConfig, dict]:
    """Merge config file values with command-line flags (flags win)."""
    file_values = read_config(args.config) if args.config else {}
    cfg = RunConfig()
    for key in RunConfig.__dataclass_fields__:
        if key in file_values:
            try:
                setattr(cfg, key, _CASTS.get(key, str)(file_values[key]))
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {file_values[key]!r}") from None
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    cfg.validate()
    return cfg, file_values


def _load_problem(cfg: RunConfig, file_values: dict):
    if "dynamics" in file_values:
        try:
            return problem_from_config(file_values)
        except (ValueError, SyntaxError) as exc:
            raise ConfigError(f"invalid problem definition: {exc}") from None
    if cfg.problem in BUILTINS:
        return builtin(cfg.problem)
    if os.path.isfile(cfg.problem):
        try:
            return problem_from_config(read_config(cfg.problem))
        except (ValueError, SyntaxError) as exc:
            raise ConfigError(f"invalid problem definition: {exc}") from None
    raise ConfigError(f"unknown problem {cfg.problem!r}; built-ins: {sorted(BUILTINS)}")


def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse state {text!r}") from None


def _write_manifest(cfg: RunConfig, command: str, problem, extra: dict, started: float):
    audit = hypothesis_audit(problem, seed=cfg.seed)
    manifest = {
        "command": command,
        "version": __version__,
        "config": {k: getattr(cfg, k) for k in RunConfig.__dataclass_fields__},
        "problem": {"name": problem.name, "dim": problem.dim, "discount": problem.discount,
                    "t0": problem.t0, "T": problem.T,
                    "domain": [list(problem.domain_lower), list(problem.domain_upper)],
                    "solve_box": [b.tolist() for b in problem.solve_box]},
        "audit": audit.as_dict(),
        "wall_time_s": time.perf_counter() - started,
    }
    manifest.update(extra)
    path = os.path.join(cfg.out, f"{problem.name}_{command}_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _solve_inputs(cfg, problem):
    grid = build_grid(*problem.solve_box, cfg.dx)
    tg = TimeGrid.from_dt(problem.t0, problem.T, cfg.dt)
    m = cfg.controls or default_control_count(problem, cfg.dx)
    return grid, tg, sample_control_grid(problem, m)


def cmd_solve(args) -> int:
    started = time.perf_counter()
    cfg, fv = _run_config(args)
    problem, _ = _load_problem(cfg, fv)
    check_discount(problem.discount, cfg.dt)
    grid, tg, controls = _solve_inputs(cfg, problem)
    V, P = solve(problem, grid, tg, controls, cfg.boundary)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, artifact_name(problem.name, "value", 0))
    write_value_csv(path, V, P)
    m = _write_manifest(cfg, "solve", problem,
                        {"outputs": [path], "nodes": grid.num_nodes, "steps": tg.steps,
                         "control_points": len(controls)}, started)
    print(f"wrote {path} and {m}")
    return EXIT_OK


def cmd_eoc(args) -> int:
    started = time.perf_counter()
    if args.levels < 2:
        raise ConfigError("eoc needs --levels >= 2")
    if not args.base > 0:
        raise ConfigError("--base must be positive")
    cfg, fv = _run_config(args)
    problem, exact = _load_problem(cfg, fv)
    if exact is None:
        raise ConfigError(f"problem {problem.name!r} has no exact solution")
    check_discount(problem.discount, args.base)
    os.makedirs(cfg.out, exist_ok=True)
    outputs = []

    def on_level(i, V):
        if args.surfaces:
            path = os.path.join(cfg.out, artifact_name(problem.name, "error", i + 1))
            write_error_surface_csv(path, V, error_surface(V, exact, V.grid.node_mask(*problem.domain)))
            outputs.append(path)

    report = refinement_study(problem, exact, args.base, args.levels, cfg.norm, cfg.controls,
                              cfg.boundary, on_level)
    path = os.path.join(cfg.out, artifact_name(problem.name, "eoc", args.levels))
    write_eoc_csv(path, report)
    outputs.append(path)
    print(report.format_table())
    _write_manifest(cfg, "eoc", problem, {"outputs": outputs, "base": args.base,
                                          "levels": args.levels}, started)
    return EXIT_OK


def _status(name: str, ok: bool, **values) -> bool:
    fields = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items())
    print(f"{'PASS' if ok else 'FAIL'} {name} {fields}".rstrip())
    return ok


def _sine_signal():
    return ControlSignal(lambda s: 0.5 * np.sin(2 * np.pi * s), 1, (), math.pi)


def _verify_dpp(args, cfg, problem) -> bool:
    lo, hi = problem.domain
    grid = make_grid(lo, hi, [args.nodes] * problem.dim)
    tg = TimeGrid(problem.t0, problem.T, args.nt)
    controls = sample_control_grid(problem, cfg.controls or 3)
    report = verify_dpp(problem, grid, tg, controls, cfg.boundary, cfg.budget, args.terminal)
    label = f"{problem.name},nodes={args.nodes},nt={args.nt},controls={len(controls)}"
    if args.terminal != "exact":
        label += f",terminal={args.terminal}"
    return _status(f"dpp[{label}]", report.deviation <= 1e-12, deviation=report.deviation)


def _verify_theta(args) -> bool:
    lam = args.lam
    top = 1.0 / (2.0 * lam)
    ok = _status("theta.small", abs(theta(lam, 1e-6 / lam) - 1.0) <= 1e-5,
                 value=theta(lam, 1e-6 / lam))
    ok &= _status("theta.half", abs(theta(lam, top) - 2 * math.log(2)) <= 1e-12,
                  value=theta(lam, top), expected=2 * math.log(2))
    dts = np.linspace(top / 100, top, 100)
    th = np.array([theta(lam, dt) for dt in dts])
    ok &= _status("theta.increasing", bool(np.all(np.diff(th) > 0)))
    ok &= _status("theta.slope_increasing", bool(np.all(np.diff((th - 1.0) / dts) > 0)))
    return ok


def _verify_gap(args) -> bool:
    lam = args.lam
    dts = [0.1 / 2**i for i in range(4)]
    gaps = [discount_weight_gap(lam, TimeGrid.from_dt(0.0, 1.0, dt)) for dt in dts]
    ratios = [a / b for a, b in zip(gaps[:-1], gaps[1:])]
    return _status("discount_gap", all(1.7 <= r <= 2.3 for r in ratios),
                   ratios=",".join(f"{r:.4f}" for r in ratios))


def _verify_lemma2(args, cfg, problem) -> bool:
    table = lemma2_study(problem, _sine_signal(), halving_steps(0.05, 4), _floats(args.x))
    os.makedirs(cfg.out, exist_ok=True)
    write_gap_csv(os.path.join(cfg.out, artifact_name(problem.name, "gap", len(table.rows))), table)
    ok = all(1.6 <= r <= 2.4 for r in table.ratios)
    return _status("lemma2", ok, gaps=",".join(f"{r[2]:.4e}" for r in table.rows),
                   ratios=",".join(f"{r:.4f}" for r in table.ratios))


def _verify_lemma1(args, cfg, problem) -> bool:
    table = lemma1_study(problem, _sine_signal(), halving_steps(0.05, 4), _floats(args.x),
                         seed=cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    write_divergence_csv(os.path.join(cfg.out, artifact_name(problem.name, "divergence", len(table.rows))),
                         table)
    ok = _status("lemma1.ratios", all(1.6 <= r <= 2.4 for r in table.ratios),
                 ratios=",".join(f"{r:.4f}" for r in table.ratios))
    if table.bound_ok is not None:
        ok &= _status("lemma1.bound", table.bound_ok,
                      slack=min(r.bound - r.divergence for r in table.rows))
    return ok


def cmd_verify(args) -> int:
    cfg, fv = _run_config(args)
    suites = ("dpp", "theta", "gap", "lemma1", "lemma2") if args.suite == "all" else (args.suite,)
    ok = True
    for suite in suites:
        if suite == "theta":
            ok &= _verify_theta(args)
        elif suite == "gap":
            ok &= _verify_gap(args)
        else:
            problem, _ = _load_problem(cfg, fv)
            if suite == "dpp":
                ok &= _verify_dpp(args, cfg, problem)
            elif suite == "lemma1":
                ok &= _verify_lemma1(args, cfg, problem)
            else:
                ok &= _verify_lemma2(args, cfg, problem)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    cfg, fv = _run_config(args)
    problem, _ = _load_problem(cfg, fv)
    x = _floats(args.x)
    if x.size != problem.dim:
        raise ConfigError(f"initial state needs {problem.dim} coordinates")
    check_discount(problem.discount, cfg.dt)
    grid, tg, controls = _solve_inputs(cfg, problem)
    if not grid.contains(x):
        raise ConfigError(f"initial state {x.tolist()} outside the grid box")
    V, P = solve(problem, grid, tg, controls, cfg.boundary)
    traj, realized = closed_loop_simulate(problem, V, P, x)
    v0 = float(V.value(x, 0, cfg.boundary))
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, artifact_name(problem.name, "trajectory", 0))
    write_trajectory_csv(path, traj.times, traj.states, traj.controls.samples)
    print(f"realized_cost={realized!r} V(x,t0)={v0!r} difference={abs(realized - v0)!r}")
    _write_manifest(cfg, "simulate", problem, {"outputs": [path], "x": x.tolist(),
                                               "realized_cost": realized, "value": v0}, started)
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg, fv = _run_config(args)
    problem, _ = _load_problem(cfg, fv)
    est = hypothesis_audit(problem, sample_count=args.samples, seed=cfg.seed)
    print(json.dumps(est.as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--problem", help="built-in name (test1, test2) or problem config file")
    shared.add_argument("--config", help="key = value run configuration file")
    shared.add_argument("--dt", type=float)
    shared.add_argument("--dx", type=float)
    shared.add_argument("--controls", type=int, help="control points per control dimension")
    shared.add_argument("--boundary", choices=("clamp", "error"))
    shared.add_argument("--norm", choices=("relative", "absolute"))
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--budget", type=int, help="enumeration budget (control sequences)")

    parser = argparse.ArgumentParser(prog="slhjb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("solve", parents=[shared], help="solve and write value/policy CSV")

    p = sub.add_parser("eoc", parents=[shared], help="refinement study with dt = dx")
    p.add_argument("--base", type=float, default=0.1)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--surfaces", action="store_true", help="also write per-level error surfaces")

    p = sub.add_parser("verify", parents=[shared], help="verification suites")
    p.add_argument("suite", nargs="?", default="all",
                   choices=("all", "dpp", "theta", "gap", "lemma1", "lemma2"))
    p.add_argument("--nodes", type=int, default=5, help="nodes per dimension (dpp)")
    p.add_argument("--nt", type=int, default=4, help="time steps (dpp)")
    p.add_argument("--terminal", choices=("exact", "interpolated"), default="exact",
                   help="terminal cost at the path end: psi or its interpolant (dpp)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="discount (theta, gap)")
    p.add_argument("--x", default="0.5", help="initial state (lemma1, lemma2)")

    p = sub.add_parser("simulate", parents=[shared], help="closed-loop rollout")
    p.add_argument("--x", required=True, help="initial state, comma separated")

    p = sub.add_parser("audit", parents=[shared], help="sample the hypothesis constants")
    p.add_argument("--samples", type=int, default=10_000)
    return parser


COMMANDS = {"solve": cmd_solve, "eoc": cmd_eoc, "verify": cmd_verify, "simulate": cmd_simulate,
            "audit": cmd_audit}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, EnumerationBudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DiscountError, OutOfDomainError, FloatingPointError) as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
