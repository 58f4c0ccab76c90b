"""Backward semi-Lagrangian value iteration and feedback synthesis."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._kernels import fused_sweep_1d, fused_sweep_2d, padded_coords, sl_sweep
from .cost import check_discount, semidiscrete_cost
from .dynamics import DiscreteTrajectory, TimeGrid, euler_trajectory
from .grid import BOUNDARY_POLICIES, Grid, NodalField, OutOfDomainError, interpolate_values, locate
from .problem import ControlGrid, ControlSequence, Problem


@dataclass(frozen=True)
class ValueField:
    """Nodal values ``V(x_i, t_n)``; ``layers[n]`` approximates ``v(., t_n)``.

    When the solve was restricted to reachable nodes, ``active[n]`` holds the
    inclusive index box computed at level ``n`` (shape ``(d, 2)``) and nodes
    outside it are NaN.
    """

    grid: Grid
    time_grid: TimeGrid
    layers: np.ndarray  # (N_t + 1, num_nodes)
    active: np.ndarray | None = None  # (N_t + 1, d, 2)

    def layer(self, n: int) -> NodalField:
        return NodalField(self.grid, self.layers[n])

    def value(self, x, n: int, policy: str = "clamp"):
        return interpolate_values(self.grid, self.layers[n], np.asarray(x, dtype=float), policy)


@dataclass(frozen=True)
class PolicyField:
    """Index of the minimising control per level ``n < N_t`` and node."""

    problem: Problem
    grid: Grid
    time_grid: TimeGrid
    controls: ControlGrid
    indices: np.ndarray  # (N_t, num_nodes)
    boundary: str = "clamp"


def active_boxes(problem: Problem, grid: Grid, tg: TimeGrid) -> np.ndarray:
    """Per-level inclusive node index boxes that the domain nodes depend on.

    Level 0 holds the domain nodes; level ``n + 1`` adds every stencil node
    touched by feet of level ``n`` according to ``problem.foot_box``.
    """
    counts = np.asarray(grid.counts)
    dom = grid.node_mask(*problem.domain).reshape(grid.counts)
    hit = np.nonzero(dom)
    if not hit[0].size:
        raise ValueError("no grid node lies in the problem domain")
    base = np.stack([[h.min(), h.max()] for h in hit])
    out = np.empty((tg.steps + 1, grid.dim, 2), dtype=np.int64)
    out[0] = base
    coords = grid.coords
    for n in range(tg.steps):
        box = out[n]
        lo = np.array([coords[k][box[k, 0]] for k in range(grid.dim)])
        hi = np.array([coords[k][box[k, 1]] for k in range(grid.dim)])
        flo, fhi = problem.foot_box(lo, hi, tg.times[n], tg.dt)
        flo = np.clip(flo, grid.lower, grid.upper)
        fhi = np.clip(fhi, grid.lower, grid.upper)
        a = np.floor((flo - grid.lower) / grid.spacing - 1e-9)
        b = np.floor((fhi - grid.lower) / grid.spacing + 1e-9) + 1
        out[n + 1, :, 0] = np.minimum(base[:, 0], np.clip(a, 0, counts - 1))
        out[n + 1, :, 1] = np.maximum(base[:, 1], np.clip(b, 0, counts - 1))
    return out


def _check_args(problem, grid, tg, controls, policy):
    if policy not in BOUNDARY_POLICIES:
        raise ValueError(f"unknown boundary policy {policy!r}")
    if len(controls) == 0:
        raise ValueError("empty control grid")
    if grid.dim != problem.dim:
        raise ValueError("grid and problem dimensions differ")
    if controls.points.shape[1] != problem.control_dim:
        raise ValueError("control grid and problem control dimensions differ")
    check_discount(problem.discount, tg.dt)


def solve(problem: Problem, grid: Grid, tg: TimeGrid, controls: ControlGrid,
          policy: str = "clamp", prune: bool = True) -> tuple[ValueField, PolicyField]:
    """Backward recursion
    ``V(x_i, t_n) = min_u dt g(x_i, t_n, u) + (1 - lambda dt) I1[V(., t_{n+1})](x_i + dt f(x_i, t_n, u))``.

    The minimum is taken over the control lattice; ties go to the smallest
    index. Level ``n`` only reads level ``n + 1``. Problems carrying a
    compiled model in one or two dimensions use the fused kernel; with
    ``prune`` and a reachable box they also skip unreachable nodes.
    """
    _check_args(problem, grid, tg, controls, policy)
    if problem.compiled is not None and grid.dim in (1, 2):
        return _solve_fused(problem, grid, tg, controls, policy, prune)
    return _solve_generic(problem, grid, tg, controls, policy)


def _solve_generic(problem, grid, tg, controls, policy):
    nodes = np.ascontiguousarray(grid.nodes())
    num = grid.num_nodes
    steps = tg.steps
    layers = np.empty((steps + 1, num))
    layers[steps] = problem.psi(nodes)
    indices = np.zeros((steps, num), dtype=np.int64)

    coords = padded_coords(grid)
    counts = np.asarray(grid.counts, dtype=np.int64)
    strides = grid.strides
    lower = np.ascontiguousarray(grid.lower)
    inv = 1.0 / grid.spacing
    dt = tg.dt
    disc = 1.0 - problem.discount * dt
    clamp = policy == "clamp"
    times = tg.times

    for n in range(steps - 1, -1, -1):
        best = np.full(num, np.inf)
        arg = indices[n]
        nxt = layers[n + 1]
        for j, u in enumerate(controls.points):
            vel = np.ascontiguousarray(problem.f(nodes, times[n], u))
            run = np.ascontiguousarray(problem.g(nodes, times[n], u))
            outside = sl_sweep(nxt, coords, counts, strides, lower, inv, nodes, vel, run, dt, disc,
                               clamp, best, arg, j)
            if outside:
                raise OutOfDomainError(
                    f"{outside} foot points leave the grid at level {n}, control {j} ('error' policy)")
        layers[n] = best
    layers.setflags(write=False)
    indices.setflags(write=False)
    return ValueField(grid, tg, layers), PolicyField(problem, grid, tg, controls, indices, policy)


def _solve_fused(problem, grid, tg, controls, policy, prune):
    num = grid.num_nodes
    steps = tg.steps
    counts = np.asarray(grid.counts, dtype=np.int64)
    full = np.stack([np.zeros_like(counts), counts - 1], axis=-1)
    if prune and problem.foot_box is not None:
        boxes = active_boxes(problem, grid, tg)
    else:
        boxes = np.broadcast_to(full, (steps + 1, grid.dim, 2))
    layers = np.full((steps + 1, num), np.nan)
    layers[steps] = problem.psi(grid.nodes())
    indices = np.zeros((steps, num), dtype=np.int64)
    inv = 1.0 / grid.spacing
    U = np.ascontiguousarray(controls.points)
    dt = tg.dt
    disc = 1.0 - problem.discount * dt
    clamp = policy == "clamp"
    f, g = problem.compiled.dynamics, problem.compiled.running_cost
    c = grid.coords
    for n in range(steps - 1, -1, -1):
        w, r = boxes[n], boxes[n + 1]
        args = (f, g, layers[n + 1]) + tuple(c) + (inv, U, tg.times[n], dt, disc, clamp,
                                                    w[:, 0].copy(), w[:, 1].copy(),
                                                    r[:, 0].copy(), r[:, 1].copy(),
                                                    layers[n], indices[n])
        kernel = fused_sweep_1d if grid.dim == 1 else fused_sweep_2d
        bad, outside, stale = kernel(*args)
        if bad:
            raise FloatingPointError(f"non-finite dynamics in problem {problem.name!r} at level {n}")
        if outside:
            raise OutOfDomainError(f"{outside} foot points leave the grid at level {n} ('error' policy)")
        if stale:
            raise RuntimeError(
                f"foot box of {problem.name!r} is too small at level {n}; solve with prune=False")
    layers.setflags(write=False)
    indices.setflags(write=False)
    active = None if (boxes == full).all() else np.array(boxes)
    return (ValueField(grid, tg, layers, active),
            PolicyField(problem, grid, tg, controls, indices, policy))


class EnumerationBudgetError(ValueError):
    """Exhaustive enumeration over control sequences would exceed the budget."""


def _check_budget(m: int, depth: int, budget: int) -> None:
    if depth > 0 and depth * np.log(m) > np.log(budget) + 1e-12:
        raise EnumerationBudgetError(
            f"{m}^{depth} control sequences exceed the enumeration budget of {budget}")


def enumerate_min_cost(problem: Problem, starts, n: int, tg: TimeGrid, controls: ControlGrid,
                       running=None, budget: int = 10**6, terminal=None) -> np.ndarray:
    """Minimum over all control sequences of the (semi/fully) discrete cost.

    ``running(y, k, j)`` returns the running cost at states ``y`` for level
    ``k`` and control index ``j``; by default the exact ``g``. ``terminal``
    replaces ``psi`` at the endpoints when given. Prefix costs
    and states are shared level by level; start states are processed in
    chunks so that at most ``budget`` leaves are alive at once.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    depth = tg.steps - n
    m = len(controls)
    _check_budget(m, depth, budget)
    check_discount(problem.discount, tg.dt)
    q = 1.0 - problem.discount * tg.dt
    dt = tg.dt
    times = tg.times
    U = controls.points
    if running is None:
        def running(y, k, j):
            return problem.g(y, times[k], U[j])
    leaves = m**depth
    chunk = max(1, budget // max(leaves, 1))
    out = np.empty(len(starts))
    for c0 in range(0, len(starts), chunk):
        ys = starts[c0:c0 + chunk]
        acc = np.zeros(len(ys))
        for k in range(n, tg.steps):
            new_y = np.empty((len(ys), m, problem.dim))
            new_acc = np.empty((len(ys), m))
            for j in range(m):
                new_acc[:, j] = acc + dt * q ** (k - n) * running(ys, k, j)
                new_y[:, j] = ys + dt * problem.f(ys, times[k], U[j])
            ys = new_y.reshape(-1, problem.dim)
            acc = new_acc.reshape(-1)
        total = acc + q**depth * (problem.psi(ys) if terminal is None else terminal(ys))
        out[c0:c0 + chunk] = total.reshape(-1, leaves).min(axis=1)
    return out


def semidiscrete_value(problem: Problem, x, n: int, tg: TimeGrid, controls: ControlGrid,
                       budget: int = 10**6) -> float:
    """``v_dt(x, t_n)`` by exhaustive enumeration (no spatial interpolation)."""
    if not 0 <= n <= tg.steps:
        raise ValueError(f"level {n} outside [0, {tg.steps}]")
    x = np.asarray(x, dtype=float).reshape(1, problem.dim)
    return float(enumerate_min_cost(problem, x, n, tg, controls, budget=budget)[0])


def _node_index(grid: Grid, x) -> int | None:
    cell, frac = locate(grid, np.asarray(x, dtype=float).reshape(grid.dim))
    if not np.all(grid.contains(x)):
        return None
    idx = cell.copy()
    for k in range(grid.dim):
        if frac[k] == 0.0:
            continue
        if frac[k] == 1.0:
            idx[k] += 1
        else:
            return None
    return int(grid.flat_index(idx))


def feedback_control(policy_field: PolicyField, V: ValueField, x, n: int) -> tuple[np.ndarray, int]:
    """Minimising control at ``(x, t_n)`` and its lattice index.

    Nodes return the stored argmin; other states re-solve the one-step
    minimisation against the interpolated level ``n + 1``.
    """
    tg = policy_field.time_grid
    if not 0 <= n < tg.steps:
        raise ValueError(f"level {n} outside [0, {tg.steps - 1}]")
    controls = policy_field.controls
    node = _node_index(policy_field.grid, x)
    if node is not None:
        j = int(policy_field.indices[n, node])
        return controls.points[j], j
    problem = policy_field.problem
    x = np.asarray(x, dtype=float).reshape(problem.dim)
    t = tg.times[n]
    U = controls.points
    xs = np.broadcast_to(x, (len(U), problem.dim))
    foot = xs + tg.dt * problem.f(xs, t, U)
    q = 1.0 - problem.discount * tg.dt
    cand = tg.dt * problem.g(xs, t, U) + q * V.value(foot, n + 1, policy_field.boundary)
    j = int(np.argmin(cand))
    return U[j], j


@dataclass(frozen=True)
class InvarianceReport:
    violations: np.ndarray  # rows (node, level, control)
    max_exit: float

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0


def check_invariance(problem: Problem, grid: Grid, tg: TimeGrid, controls: ControlGrid,
                     tol: float = 1e-12) -> InvarianceReport:
    """Euler foot points ``x_i + dt f(x_i, t_n, u)`` that leave the grid box."""
    nodes = grid.nodes()
    rows = []
    worst = 0.0
    slack = tol * np.maximum(1.0, grid.upper - grid.lower)
    for n, t in enumerate(tg.times[:-1]):
        for j, u in enumerate(controls.points):
            foot = nodes + tg.dt * problem.f(nodes, t, u)
            excess = np.maximum(np.maximum(grid.lower - foot, foot - grid.upper), 0.0)
            bad = np.nonzero(np.any(excess > slack, axis=1))[0]
            if bad.size:
                worst = max(worst, float(excess[bad].max()))
                rows.append(np.column_stack([bad, np.full(bad.size, n), np.full(bad.size, j)]))
    viol = np.concatenate(rows) if rows else np.zeros((0, 3), dtype=np.int64)
    return InvarianceReport(viol, worst)


def closed_loop_simulate(problem: Problem, V: ValueField, policy_field: PolicyField,
                         x) -> tuple[DiscreteTrajectory, float]:
    """Feedback rollout from ``(x, t0)``; returns the trajectory and its semidiscrete cost."""
    x = np.asarray(x, dtype=float).reshape(problem.dim)
    if not V.grid.contains(x):
        raise ValueError(f"initial state {x} outside the grid box")
    tg = V.time_grid
    samples = np.empty((tg.steps + 1, problem.control_dim))
    y = x.copy()
    for n in range(tg.steps):
        samples[n], _ = feedback_control(policy_field, V, y, n)
        y = y + tg.dt * problem.f(y, tg.times[n], samples[n])
    samples[-1] = samples[-2]
    seq = ControlSequence(samples, tg)
    traj = euler_trajectory(problem, x, seq, tg)
    return traj, semidiscrete_cost(problem, x, 0, seq, tg)


def write_value_csv(path, V: ValueField, policy_field: PolicyField | None = None,
                    levels=None) -> None:
    """One row per node and level: ``t, x_1..x_d, V, u_1..u_c`` (controls empty at ``T``)."""
    nodes = V.grid.nodes()
    tg = V.time_grid
    levels = range(tg.steps + 1) if levels is None else levels
    c = policy_field.controls.points.shape[1] if policy_field is not None else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{k + 1}" for k in range(V.grid.dim)] + ["V"]
                   + [f"u_{k + 1}" for k in range(c)])
        for n in levels:
            t = repr(float(tg.times[n]))
            us = None
            if policy_field is not None and n < tg.steps:
                us = policy_field.controls.points[policy_field.indices[n]]
            for i, x in enumerate(nodes):
                row = [t] + [repr(float(v)) for v in x] + [repr(float(V.layers[n, i]))]
                if c:
                    row += [repr(float(v)) for v in us[i]] if us is not None else [""] * c
                w.writerow(row)
