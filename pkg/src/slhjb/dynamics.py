"""Euler and reference integration of the controlled ODE."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .problem import ControlSequence, ControlSignal, Problem


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("time grid needs at least one step")
        if not self.T > self.t0:
            raise ValueError("T must exceed t0")

    @classmethod
    def from_dt(cls, t0: float, T: float, dt: float) -> "TimeGrid":
        """Grid whose step is the largest ``(T - t0) / N <= dt``."""
        if not dt > 0:
            raise ValueError(f"time step must be positive, got {dt}")
        ratio = (T - t0) / dt
        steps = round(ratio) if abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio) else math.ceil(ratio)
        return cls(t0, T, max(int(steps), 1))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        t = self.t0 + self.dt * np.arange(self.steps + 1)
        t[-1] = self.T
        return t

    def level(self, s) -> np.ndarray | int:
        """Floor index ``floor((s - t0) / dt)`` clamped to ``[0, steps]``."""
        s = np.asarray(s, dtype=float)
        k = np.floor((s - self.t0) / self.dt + 1e-12)
        out = np.clip(k, 0, self.steps).astype(np.int64)
        return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DiscreteTrajectory:
    states: np.ndarray  # (N_t + 1 - start, d)
    time_grid: TimeGrid
    controls: ControlSequence
    start: int = 0

    @property
    def times(self) -> np.ndarray:
        return self.time_grid.times[self.start:]

    def extension(self, s) -> np.ndarray:
        """Piecewise-constant extension ``y_bar(s)``."""
        k = np.asarray(self.time_grid.level(s)) - self.start
        return self.states[np.clip(k, 0, len(self.states) - 1)]


@dataclass(frozen=True)
class ReferenceTrajectory:
    times: np.ndarray
    states: np.ndarray
    h_ref: float
    controls: np.ndarray = field(repr=False)

    def at(self, s) -> np.ndarray:
        """State at ``s`` by linear interpolation between dense samples."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.stack([np.interp(s, self.times, self.states[:, k]) for k in range(self.states.shape[1])], -1)
        return out


def euler_trajectory(problem: Problem, x, seq: ControlSequence, tg: TimeGrid, start: int = 0) -> DiscreteTrajectory:
    """Explicit Euler ``y_{k+1} = y_k + dt f(y_k, t_k, u_k)`` from ``y_start = x``.

    No projection onto the domain is applied.
    """
    if seq.samples.shape[0] != tg.steps + 1:
        raise ValueError("control sequence does not match the time grid")
    if not 0 <= start <= tg.steps:
        raise ValueError(f"start level {start} outside [0, {tg.steps}]")
    x = np.asarray(x, dtype=float).reshape(problem.dim)
    times = tg.times
    dt = tg.dt
    ys = np.empty((tg.steps + 1 - start, problem.dim))
    ys[0] = x
    for j, k in enumerate(range(start, tg.steps)):
        ys[j + 1] = ys[j] + dt * problem.f(ys[j], times[k], seq.samples[k])
    return DiscreteTrajectory(ys, tg, seq, start)


def reference_trajectory(problem: Problem, x, signal: ControlSignal, t_start: float,
                         h_ref: float) -> ReferenceTrajectory:
    """Classical fixed-step RK4 from ``t_start`` to ``T`` with step ``<= h_ref``.

    Steps are aligned so that every declared breakpoint of the signal falls
    on a step boundary.
    """
    if not h_ref > 0:
        raise ValueError("h_ref must be positive")
    cuts = sorted({t_start, problem.T, *(b for b in signal.breakpoints if t_start < b < problem.T)})
    times = [np.array([t_start])]
    for a, b in zip(cuts[:-1], cuts[1:]):
        n = max(1, math.ceil((b - a) / h_ref - 1e-9))
        seg = a + (b - a) * np.arange(1, n + 1) / n
        times.append(seg)
    times = np.concatenate(times)
    y = np.empty((times.size, problem.dim))
    y[0] = np.asarray(x, dtype=float).reshape(problem.dim)

    def rhs(state, s):
        return problem.f(state, s, signal(s))

    for i in range(times.size - 1):
        s, h = times[i], times[i + 1] - times[i]
        # evaluate the control left-continuously on each step so jumps at breakpoints are respected
        s_mid = s + 0.5 * h
        s_end = times[i + 1] - 1e-14 * max(1.0, abs(times[i + 1]))
        k1 = rhs(y[i], s)
        k2 = rhs(y[i] + 0.5 * h * k1, s_mid)
        k3 = rhs(y[i] + 0.5 * h * k2, s_mid)
        k4 = rhs(y[i] + h * k3, s_end)
        y[i + 1] = y[i] + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return ReferenceTrajectory(times, y, h_ref, signal(times))


def piecewise_constant_extension(seq: ControlSequence) -> ControlSignal:
    """Right-open step signal through ``u_0, ..., u_{N_t - 1}``; the last interval is closed."""
    tg = seq.time_grid
    samples = seq.samples

    times = tg.times

    def func(s):
        # exact comparison with the nodes, so left limits stay on their interval
        k = np.clip(np.searchsorted(times, s, side="right") - 1, 0, tg.steps - 1)
        return samples[k]

    return ControlSignal(func, samples.shape[1], tuple(tg.times[1:-1]))


@dataclass(frozen=True)
class Divergence:
    distances: np.ndarray  # d_n per time level
    max: float


def trajectory_divergence(ref: ReferenceTrajectory, disc: DiscreteTrajectory) -> Divergence:
    """``d_n = ||y(t_n) - y_n||_inf`` at the discrete time levels."""
    times = disc.times
    if abs(ref.times[0] - times[0]) > 1e-12 or abs(ref.times[-1] - times[-1]) > 1e-12:
        raise ValueError("reference and discrete trajectories cover different horizons")
    if np.max(np.abs(ref.states[0] - disc.states[0])) > 0:
        raise ValueError("trajectories start from different states")
    d = np.max(np.abs(ref.at(times) - disc.states), axis=1)
    return Divergence(d, float(d.max()))


def write_trajectory_csv(path, times, states, controls) -> None:
    states = np.asarray(states)
    controls = np.asarray(controls).reshape(len(times), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"y_{k + 1}" for k in range(states.shape[1])]
                   + [f"u_{k + 1}" for k in range(controls.shape[1])])
        for t, y, u in zip(times, states, controls):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in y] + [repr(float(v)) for v in u])
