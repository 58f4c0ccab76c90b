"""Continuous, semidiscrete and fully discrete cost functionals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import TimeGrid, euler_trajectory, reference_trajectory
from .grid import Grid, interpolate_values
from .problem import ControlSequence, ControlSignal, Problem


class DiscountError(ValueError):
    """Time step too large for the discount: need ``dt <= 1 / (2 lambda)``."""


def check_discount(lam: float, dt: float) -> None:
    if lam > 0 and lam * dt > 0.5 * (1 + 1e-12):
        raise DiscountError(f"dt={dt} exceeds 1/(2*lambda)={0.5 / lam} for lambda={lam}")


@dataclass(frozen=True)
class DiscountWeights:
    lam: float
    dt: float
    factors: np.ndarray  # (1 - lam dt)^k, k = 0..N_t


def discount_weights(lam: float, tg: TimeGrid) -> DiscountWeights:
    check_discount(lam, tg.dt)
    factors = (1.0 - lam * tg.dt) ** np.arange(tg.steps + 1)
    return DiscountWeights(lam, tg.dt, factors)


def continuous_cost(problem: Problem, x, t: float, signal: ControlSignal, h_ref: float) -> float:
    """Cost of ``signal`` from ``(x, t)``: RK4 trajectory plus composite trapezoid.

    Each trapezoid panel uses the left limit of the control at its right end,
    so jumps at declared breakpoints do not pollute the quadrature.
    """
    if not problem.t0 - 1e-12 <= t <= problem.T + 1e-12:
        raise ValueError(f"t={t} outside [{problem.t0}, {problem.T}]")
    lam = problem.discount
    if t >= problem.T - 1e-15:
        return float(problem.psi(np.asarray(x, dtype=float).reshape(problem.dim)))
    ref = reference_trajectory(problem, x, signal, t, h_ref)
    s, y = ref.times, ref.states
    left_u = signal(s[:-1])
    right_s = s[1:] - 1e-14 * np.maximum(1.0, np.abs(s[1:]))
    right_u = signal(right_s)
    w = np.exp(-lam * (s - t))
    left = problem.g(y[:-1], s[:-1], left_u) * w[:-1]
    right = problem.g(y[1:], s[1:], right_u) * w[1:]
    running = float(np.sum(0.5 * np.diff(s) * (left + right)))
    return running + math.exp(-lam * (problem.T - t)) * float(problem.psi(y[-1]))


def _discounted_sum(problem, tg, n, running, terminal):
    lam = problem.discount
    check_discount(lam, tg.dt)
    q = 1.0 - lam * tg.dt
    k = np.arange(running.size)
    return float(tg.dt * np.sum(running * q**k) + q ** (tg.steps - n) * terminal)


def semidiscrete_cost(problem: Problem, x, n: int, seq: ControlSequence, tg: TimeGrid) -> float:
    """``dt sum_k g(y_k, t_k, u_k) q^{k-n} + q^{N-n} psi(y_N)`` with ``q = 1 - lambda dt``."""
    check_discount(problem.discount, tg.dt)
    traj = euler_trajectory(problem, x, seq, tg, start=n)
    ks = np.arange(n, tg.steps)
    y = traj.states[:-1]
    running = problem.g(y, tg.times[ks], seq.samples[ks]) if ks.size else np.zeros(0)
    return _discounted_sum(problem, tg, n, np.asarray(running), float(problem.psi(traj.states[-1])))


def interpolated_running_cost(problem: Problem, grid: Grid, y, t: float, u, policy: str = "clamp"):
    """``I1[g](y, t, u)``: g sampled on the nodes for fixed ``(t, u)``, interpolated in space."""
    nodal = problem.g(grid.nodes(), t, np.asarray(u, dtype=float))
    return interpolate_values(grid, nodal, y, policy)


def discrete_cost(problem: Problem, grid: Grid, x, n: int, seq: ControlSequence, tg: TimeGrid,
                  policy: str = "clamp") -> float:
    """Fully discrete cost: like :func:`semidiscrete_cost` but with ``I1[g]``.

    The terminal term uses ``psi`` at the raw Euler endpoint.
    """
    check_discount(problem.discount, tg.dt)
    traj = euler_trajectory(problem, x, seq, tg, start=n)
    times = tg.times
    running = np.array([
        interpolated_running_cost(problem, grid, traj.states[j], times[k], seq.samples[k], policy)
        for j, k in enumerate(range(n, tg.steps))
    ])
    return _discounted_sum(problem, tg, n, running, float(problem.psi(traj.states[-1])))


def theta(lam: float, dt: float) -> float:
    """``|log(1 - lambda dt)| / (lambda dt)``, defined for ``0 < lambda dt <= 1/2``."""
    z = lam * dt
    if not (0 < z <= 0.5 * (1 + 1e-15)):
        raise ValueError(f"theta needs 0 < lambda*dt <= 1/2, got {z}")
    return -math.log1p(-min(z, 0.5)) / z


def discount_weight_gap(lam: float, tg: TimeGrid) -> float:
    """``sup_s |exp(-lambda (s - t0)) - (1 - lambda dt)^floor((s - t0)/dt)|`` on ``[t0, T]``.

    On each step interval the continuous weight is monotone and the discrete
    one constant, so the supremum is attained at an interval end (the right
    end as a left limit); these are evaluated exactly.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    check_discount(lam, tg.dt)
    if lam == 0:
        return 0.0
    k = np.arange(tg.steps)
    q = (1.0 - lam * tg.dt) ** k
    left = np.abs(np.exp(-lam * k * tg.dt) - q)
    right = np.abs(np.exp(-lam * (k + 1) * tg.dt) - q)
    return float(max(left.max(), right.max()))


def cost_gap(problem: Problem, grid: Grid, x, t: float, signal: ControlSignal, tg: TimeGrid,
             h_ref: float | None = None, policy: str = "clamp") -> float:
    """``|J(x, t, u) - J_{dt,dx}^{t_n}(x, u_n = u(t_n))|`` with ``n = floor((t - t0)/dt)``."""
    n = tg.level(t)
    seq = ControlSequence.from_signal(signal, tg)
    h = h_ref if h_ref is not None else tg.dt / 100.0
    cont = continuous_cost(problem, x, t, signal, h)
    disc = discrete_cost(problem, grid, x, n, seq, tg, policy)
    return abs(cont - disc)
