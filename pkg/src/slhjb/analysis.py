"""Error norms, convergence tables and empirical checks of the error analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .cost import cost_gap
from .dynamics import TimeGrid, euler_trajectory, reference_trajectory, trajectory_divergence
from .grid import Grid, build_grid, interpolate_values
from .problem import (ControlGrid, ControlSequence, ControlSignal, ExactSolution, Problem,
                      control_oscillation, hypothesis_audit, sample_control_grid)
from .solver import ValueField, enumerate_min_cost, solve

NORM_KINDS = ("absolute", "relative")


@dataclass(frozen=True)
class EocRow:
    dt: float
    dx: float
    error: float
    eoc: float | None = None


@dataclass(frozen=True)
class EocReport:
    rows: tuple[EocRow, ...]
    norm_kind: str = "absolute"

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.rows])

    @property
    def eocs(self) -> list[float | None]:
        return [r.eoc for r in self.rows[1:]]

    def format_table(self) -> str:
        lines = [f"{'dt':>10} {'dx':>10} {self.norm_kind + ' error':>16} {'EOC':>8}"]
        for r in self.rows:
            e = "" if r.eoc is None else f"{r.eoc:.4f}"
            lines.append(f"{r.dt:>10.5g} {r.dx:>10.5g} {r.error:>16.4e} {e:>8}")
        return "\n".join(lines)


@dataclass(frozen=True)
class ErrorSurface:
    """Signed error ``V - v`` per level and node; NaN where not measured."""

    values: np.ndarray  # (N_t + 1, num_nodes)
    mask: np.ndarray  # nodes included in the norm

    def sup(self) -> float:
        return float(np.max(np.abs(self.values[:, self.mask]))) if self.mask.any() else 0.0


def _exact_layers(V: ValueField, exact: ExactSolution, mask: np.ndarray) -> np.ndarray:
    x = V.grid.nodes()[mask]
    out = np.empty((V.time_grid.steps + 1, x.shape[0]))
    for n, t in enumerate(V.time_grid.times):
        out[n] = np.broadcast_to(exact.value(x, t), x.shape[:1])
    if not np.all(np.isfinite(out)):
        raise ValueError("exact solution is undefined at some node")
    return out


def error_surface(V: ValueField, exact: ExactSolution, mask=None) -> ErrorSurface:
    mask = np.ones(V.grid.num_nodes, bool) if mask is None else np.asarray(mask, bool)
    vals = np.full(V.layers.shape, np.nan)
    computed = V.layers[:, mask]
    if not np.all(np.isfinite(computed)):
        raise ValueError("value field is not available at every measured node")
    vals[:, mask] = computed - _exact_layers(V, exact, mask)
    return ErrorSurface(vals, mask)


def sup_error(V: ValueField, exact: ExactSolution, kind: str = "absolute", mask=None) -> float:
    """Max over levels and (masked) nodes of ``|V - v|``; ``relative`` divides by max ``|v|``."""
    if kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {kind!r}")
    surface = error_surface(V, exact, mask)
    err = surface.sup()
    if kind == "relative":
        scale = float(np.max(np.abs(_exact_layers(V, exact, surface.mask))))
        if scale == 0.0:
            raise ValueError("relative error undefined: exact solution vanishes on the measured set")
        err /= scale
    return err


def eoc(coarse_error: float, fine_error: float) -> float:
    """``log2(coarse / fine)`` for a halved step."""
    if not (coarse_error > 0 and fine_error > 0):
        raise ValueError("EOC needs positive errors")
    return math.log2(coarse_error / fine_error)


def default_control_count(problem: Problem, dx: float) -> int:
    """Control points per control dimension: domain nodes along the first state axis."""
    lo, hi = problem.domain
    return build_grid(lo[:1], hi[:1], dx).counts[0]


def ladder_solve(problem: Problem, step: float, controls: int | None = None,
                 policy: str = "clamp") -> ValueField:
    """Solve with ``dt = dx = step`` on the problem's solve box."""
    grid = build_grid(*problem.solve_box, step)
    tg = TimeGrid.from_dt(problem.t0, problem.T, step)
    m = default_control_count(problem, step) if controls is None else controls
    V, _ = solve(problem, grid, tg, sample_control_grid(problem, m), policy)
    return V


def refinement_study(problem: Problem, exact: ExactSolution, base_step: float, levels: int,
                     norm: str = "absolute", controls: int | None = None, policy: str = "clamp",
                     on_level=None) -> EocReport:
    """Errors for ``dt = dx = base_step / 2^i``, i < levels, with chained EOC.

    Errors are measured on grid nodes inside the problem domain over all
    time levels. ``on_level(i, V)`` is called after each solve.
    """
    if levels < 2:
        raise ValueError("a refinement study needs at least 2 levels")
    if norm not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {norm!r}")
    rows = []
    prev = None
    for i in range(levels):
        step = base_step / 2**i
        V = ladder_solve(problem, step, controls, policy)
        if on_level is not None:
            on_level(i, V)
        err = sup_error(V, exact, norm, V.grid.node_mask(*problem.domain))
        rate = eoc(prev, err) if prev and err > 0 else None
        rows.append(EocRow(V.time_grid.dt, float(V.grid.spacing.max()), err, rate))
        prev = err
    return EocReport(tuple(rows), norm)


@dataclass(frozen=True)
class DppReport:
    deviation: float
    per_level: np.ndarray  # max deviation at each level n < N_t


def verify_dpp(problem: Problem, grid: Grid, tg: TimeGrid, controls: ControlGrid,
               policy: str = "clamp", budget: int = 10**6, terminal: str = "exact") -> DppReport:
    """Compare the backward recursion with brute-force minimisation of the discrete cost.

    For every node and level ``n < N_t`` the minimum over all control
    sequences of ``dt sum q^(k-n) I1[g](y_k) + q^(N-n) psi(y_N)`` along
    Euler paths is computed by enumeration and compared with ``V``. With
    ``terminal="interpolated"`` the last term is ``I1[psi](y_N)`` instead,
    which is what the recursion itself sees at its final step.
    """
    if terminal not in ("exact", "interpolated"):
        raise ValueError(f"unknown terminal mode {terminal!r}")
    V, _ = solve(problem, grid, tg, controls, policy, prune=False)
    nodes = grid.nodes()
    U = controls.points
    times = tg.times
    nodal_g = {}

    def running(y, k, j):
        if (k, j) not in nodal_g:
            nodal_g[k, j] = problem.g(nodes, times[k], U[j])
        return interpolate_values(grid, nodal_g[k, j], y, policy)

    psi = None
    if terminal == "interpolated":
        nodal_psi = V.layers[-1]

        def psi(y):
            return interpolate_values(grid, nodal_psi, y, policy)

    per_level = np.zeros(tg.steps)
    for n in range(tg.steps):
        best = enumerate_min_cost(problem, nodes, n, tg, controls, running, budget, psi)
        per_level[n] = np.max(np.abs(best - V.layers[n]))
    return DppReport(float(per_level.max()), per_level)


def _ratios(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return v[:-1] / v[1:]


@dataclass(frozen=True)
class GapTable:
    rows: tuple[tuple[float, float, float], ...]  # (dt, dx, gap)
    ratios: np.ndarray = field(repr=False)


def lemma2_study(problem: Problem, signal: ControlSignal, steps, x, t: float | None = None,
                 policy: str = "clamp") -> GapTable:
    """``cost_gap`` for each ``(dt, dx)`` pair with consecutive ratios."""
    t = problem.t0 if t is None else t
    rows = []
    for dt, dx in steps:
        grid = build_grid(*problem.solve_box, dx)
        tg = TimeGrid.from_dt(problem.t0, problem.T, dt)
        rows.append((tg.dt, dx, cost_gap(problem, grid, x, t, signal, tg, policy=policy)))
    return GapTable(tuple(rows), _ratios([r[2] for r in rows]))


@dataclass(frozen=True)
class DivergenceRow:
    dt: float
    dx: float
    divergence: float
    M_u: float
    bound: float | None


@dataclass(frozen=True)
class DivergenceTable:
    rows: tuple[DivergenceRow, ...]
    ratios: np.ndarray = field(repr=False)

    @property
    def bound_ok(self) -> bool | None:
        """Every divergence within its explicit bound (None when no bound applies)."""
        if any(r.bound is None for r in self.rows):
            return None
        return all(r.divergence <= r.bound + 1e-8 for r in self.rows)


def lemma1_study(problem: Problem, signal: ControlSignal, steps, x, t: float | None = None,
                 seed: int = 0, h_ref_factor: float = 0.01) -> DivergenceTable:
    """Max distance between the reference and Euler trajectories per step.

    When the audited state-Lipschitz constant of ``f`` vanishes the
    divergence is compared with ``(T - t) L_f,u M_u + 2 M_f dt``.
    """
    t = problem.t0 if t is None else t
    audit = hypothesis_audit(problem, seed=seed)
    rows = []
    for dt, dx in steps:
        tg = TimeGrid.from_dt(t, problem.T, dt)
        seq = ControlSequence.from_signal(signal, tg)
        disc = euler_trajectory(problem, x, seq, tg)
        ref = reference_trajectory(problem, x, signal, t, tg.dt * h_ref_factor)
        d = trajectory_divergence(ref, disc).max
        m_u = control_oscillation(signal, tg)
        bound = None
        if audit.L_f_state == 0.0:
            bound = (problem.T - t) * audit.L_f_control * m_u + 2.0 * audit.M_f * tg.dt
        rows.append(DivergenceRow(tg.dt, dx, d, m_u, bound))
    return DivergenceTable(tuple(rows), _ratios([r.divergence for r in rows]))


def halving_steps(base: float, levels: int) -> list[tuple[float, float]]:
    return [(base / 2**i, base / 2**i) for i in range(levels)]


# ---------------------------------------------------------------------------
# CSV output


def artifact_name(test: str, kind: str, level: int | str) -> str:
    return f"{test}_{kind}_{level}.csv"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_eoc_csv(path, report: EocReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dt", "dx", "error", "eoc"])
        for r in report.rows:
            w.writerow([_fmt(r.dt), _fmt(r.dx), _fmt(r.error), _fmt(r.eoc)])


def write_error_surface_csv(path, V: ValueField, surface: ErrorSurface) -> None:
    nodes = V.grid.nodes()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{k + 1}" for k in range(V.grid.dim)] + ["error"])
        idx = np.nonzero(surface.mask)[0]
        for n, t in enumerate(V.time_grid.times):
            for i in idx:
                w.writerow([_fmt(t)] + [_fmt(v) for v in nodes[i]] + [_fmt(surface.values[n, i])])


def write_gap_csv(path, table: GapTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dt", "dx", "gap", "ratio"])
        for i, (dt, dx, gap) in enumerate(table.rows):
            ratio = table.ratios[i - 1] if i else None
            w.writerow([_fmt(dt), _fmt(dx), _fmt(gap), _fmt(ratio)])


def write_divergence_csv(path, table: DivergenceTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dt", "dx", "divergence", "M_u", "bound", "ratio"])
        for i, r in enumerate(table.rows):
            ratio = table.ratios[i - 1] if i else None
            w.writerow([_fmt(r.dt), _fmt(r.dx), _fmt(r.divergence), _fmt(r.M_u), _fmt(r.bound),
                        _fmt(ratio)])
