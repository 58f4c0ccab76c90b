"""Finite-horizon optimal control problems and their diagnostics.

All problem callables are vectorised with numpy broadcasting:

* ``dynamics(x, t, u)``: ``x`` has shape ``(..., d)``, ``u`` shape ``(..., c)``,
  result shape ``(..., d)``;
* ``running_cost(x, t, u)``: result shape ``(...)``;
* ``terminal_cost(x)``: result shape ``(...)``.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class CompiledModel:
    """Scalar numba-jitted twins of the dynamics and running cost.

    ``dynamics(x, t, u, out)`` writes ``f`` into ``out``;
    ``running_cost(x, t, u)`` returns ``g``. Both must reproduce the numpy
    callables bit for bit; the solver uses them in its fused kernel.
    """

    dynamics: Callable
    running_cost: Callable


@dataclass(frozen=True)
class Problem:
    """Controlled ODE ``y' = f(y, t, u)`` with discounted cost on ``[t0, T]``.

    ``domain_*`` is the box on which the value function is sought. The
    optional ``solve_*`` box, when larger, is where the grid is laid out so
    that characteristics starting in the domain never hit the boundary.
    """

    name: str
    dim: int
    dynamics: Callable
    running_cost: Callable
    terminal_cost: Callable
    discount: float
    t0: float
    T: float
    domain_lower: tuple[float, ...]
    domain_upper: tuple[float, ...]
    control_lower: tuple[float, ...]
    control_upper: tuple[float, ...]
    solve_lower: tuple[float, ...] | None = None
    solve_upper: tuple[float, ...] | None = None
    compiled: CompiledModel | None = field(default=None, repr=False, compare=False)
    # (lower, upper, t, dt) -> box containing x + dt f(x, t, u) for all x in
    # [lower, upper] and u in U; lets the solver skip nodes that never matter
    foot_box: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"horizon end T={self.T} must exceed t0={self.t0}")
        if not self.discount >= 0:
            raise ValueError(f"discount must be >= 0, got {self.discount}")
        for lo, hi in ((self.domain_lower, self.domain_upper), (self.control_lower, self.control_upper)):
            if len(lo) != len(hi) or any(a > b for a, b in zip(lo, hi)):
                raise ValueError(f"invalid box {lo} .. {hi}")
        if len(self.domain_lower) != self.dim:
            raise ValueError("domain box dimension does not match the state dimension")

    @property
    def control_dim(self) -> int:
        return len(self.control_lower)

    @property
    def domain(self) -> tuple[Array, Array]:
        return np.array(self.domain_lower, dtype=float), np.array(self.domain_upper, dtype=float)

    @property
    def solve_box(self) -> tuple[Array, Array]:
        if self.solve_lower is None:
            return self.domain
        return np.array(self.solve_lower, dtype=float), np.array(self.solve_upper, dtype=float)

    @property
    def control_box(self) -> tuple[Array, Array]:
        return np.array(self.control_lower, dtype=float), np.array(self.control_upper, dtype=float)

    def f(self, x, t, u) -> Array:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (self.dim,)
        out = np.broadcast_to(np.asarray(self.dynamics(x, t, u), dtype=float), shape)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite dynamics in problem {self.name!r}")
        return out

    def g(self, x, t, u) -> Array:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return np.broadcast_to(np.asarray(self.running_cost(x, t, u), dtype=float), shape)

    def psi(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.terminal_cost(x), dtype=float), x.shape[:-1])

    def max_stable_dt(self) -> float:
        return math.inf if self.discount == 0 else 1.0 / (2.0 * self.discount)


@dataclass(frozen=True)
class ExactSolution:
    value: Callable  # (x, t) -> v
    optimal_control: Callable | None = None  # (x, t) -> u


@functools.lru_cache(maxsize=None)
def _compiled(name: str) -> CompiledModel:
    from numba import njit

    if name == "test1":
        @njit(cache=True)
        def f(x, t, u, out):
            out[0] = u[0]

        @njit(cache=True)
        def g(x, t, u):
            return 0.5 * u[0] ** 2
    else:
        @njit(cache=True)
        def f(x, t, u, out):
            out[0] = u[0]
            out[1] = x[0] ** 2

        @njit(cache=True)
        def g(x, t, u):
            return 0.0
    return CompiledModel(f, g)


# ---------------------------------------------------------------------------
# Test 1: scalar linear-quadratic problem with a Riccati value function


class RiccatiOracle:
    """Backward RK4 solution of ``P' = lam * P + P**2``, ``P(T) = p_T``.

    This is the Riccati equation obtained by inserting ``v = P(t) x**2 / 2``
    into the HJB equation of ``y' = u``, ``g = u**2 / 2``, ``psi = p_T x**2 / 2``
    with discount ``lam``. The table is evaluated between steps with cubic
    Hermite interpolation using the known derivative.
    """

    def __init__(self, lam: float, t0: float, T: float, p_T: float = 1.0, max_step: float = 1e-5):
        self.lam = lam
        steps = math.ceil((T - t0) / max_step)
        self.h = (T - t0) / steps
        self.t0, self.T = t0, T
        rhs = self.rhs
        p = np.empty(steps + 1)
        p[steps] = p_T
        h = -self.h
        y = p_T
        for k in range(steps, 0, -1):
            k1 = rhs(y)
            k2 = rhs(y + 0.5 * h * k1)
            k3 = rhs(y + 0.5 * h * k2)
            k4 = rhs(y + h * k3)
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            p[k - 1] = y
        self.table = p

    def rhs(self, p):
        return self.lam * p + p * p

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        s = (t - self.t0) / self.h
        n = self.table.size - 1
        i = np.clip(np.floor(s), 0, n - 1).astype(np.int64)
        # snap to table nodes so that t_n values hit the table exactly
        snap = np.abs(s - np.round(s)) < 1e-9
        i = np.where(snap, np.clip(np.round(s), 0, n).astype(np.int64), i)
        tau = np.where(snap, 0.0, s - i)
        ip = np.minimum(i + 1, n)
        p0, p1 = self.table[i], self.table[ip]
        d0, d1 = self.rhs(p0) * self.h, self.rhs(p1) * self.h
        h00 = 2 * tau**3 - 3 * tau**2 + 1
        h10 = tau**3 - 2 * tau**2 + tau
        h01 = -2 * tau**3 + 3 * tau**2
        h11 = tau**3 - tau**2
        out = h00 * p0 + h10 * d0 + h01 * p1 + h11 * d1
        return float(out) if out.ndim == 0 else out


def riccati_closed_form(t, lam: float = 1.0, T: float = 1.0):
    """Bounded solution of ``P' = lam P + P**2``, ``P(T) = 1`` (valid for lam = 1)."""
    if lam != 1.0:
        raise ValueError("closed form only available for lam = 1")
    e = np.exp(np.asarray(t, dtype=float) - T)
    return e / (2.0 - e)


@functools.lru_cache(maxsize=8)
def _riccati(lam, t0, T):
    return RiccatiOracle(lam, t0, T)


def _f_test1(x, t, u):
    return np.broadcast_to(u, np.broadcast_shapes(x.shape, u.shape))


def _g_test1(x, t, u):
    return 0.5 * u[..., 0] ** 2


def _psi_test1(x):
    return 0.5 * x[..., 0] ** 2


def make_test1(T: float = 1.0, discount: float = 1.0) -> tuple[Problem, ExactSolution]:
    """``y' = u`` on [-1, 1], ``g = u^2/2``, ``psi = x^2/2``, U = [-1, 1]."""
    problem = Problem(
        compiled=_compiled("test1"),
        name="test1",
        dim=1,
        dynamics=_f_test1,
        running_cost=_g_test1,
        terminal_cost=_psi_test1,
        discount=discount,
        t0=0.0,
        T=T,
        domain_lower=(-1.0,),
        domain_upper=(1.0,),
        control_lower=(-1.0,),
        control_upper=(1.0,),
    )
    P = _riccati(discount, 0.0, T)

    def value(x, t):
        x = np.asarray(x, dtype=float)
        return 0.5 * P(t) * x[..., 0] ** 2

    def control(x, t):
        x = np.asarray(x, dtype=float)
        return np.clip(-P(t) * x, -1.0, 1.0)

    return problem, ExactSolution(value, control)


def _f_test2(x, t, u):
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    return np.stack([np.broadcast_to(u[..., 0], shape), np.broadcast_to(x[..., 0] ** 2, shape)], axis=-1)


def _g_test2(x, t, u):
    return np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]))


def _psi_test2(x):
    return -x[..., 1]


def _foot_box_test2(lo, hi, t, dt):
    # rounding is monotone, so the bounds hold for the floating-point feet too
    sq = max(lo[0] ** 2, hi[0] ** 2)
    return np.array([lo[0] - dt, lo[1]]), np.array([hi[0] + dt, hi[1] + dt * sq])


def make_test2(T: float = 1.0) -> tuple[Problem, ExactSolution]:
    """``y' = (u, y1^2)`` on [-1, 1]^2, ``g = 0``, ``psi = -x2``, no discount.

    Optimal controls push ``|y1|`` outward, so trajectories from the domain
    reach ``|y1| = 1 + (T - t)`` and drift upward in ``y2`` by up to
    ``((1 + T - t)^3 - 1) / 3``. The solve box covers that reachable set.
    """
    horizon = T
    top = 1.0 + ((1.0 + horizon) ** 3 - 1.0) / 3.0
    top = math.ceil(top * 5.0) / 5.0  # 3.4 for T = 1; a multiple of 0.2 keeps dyadic grids aligned
    problem = Problem(
        name="test2",
        dim=2,
        dynamics=_f_test2,
        running_cost=_g_test2,
        terminal_cost=_psi_test2,
        discount=0.0,
        t0=0.0,
        T=T,
        domain_lower=(-1.0, -1.0),
        domain_upper=(1.0, 1.0),
        control_lower=(-1.0,),
        control_upper=(1.0,),
        solve_lower=(-1.0 - horizon, -1.0),
        solve_upper=(1.0 + horizon, top),
        compiled=_compiled("test2"),
        foot_box=_foot_box_test2,
    )

    def value(x, t):
        x = np.asarray(x, dtype=float)
        tau = T - np.asarray(t, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return -x2 - x1**2 * tau - tau**3 / 3.0 - np.abs(x1) * tau**2

    def control(x, t):
        x = np.asarray(x, dtype=float)
        return np.where(x[..., 0] >= 0, 1.0, -1.0)

    return problem, ExactSolution(value, control)


BUILTINS = {"test1": make_test1, "test2": make_test2}


def builtin(name: str) -> tuple[Problem, ExactSolution]:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise KeyError(f"unknown built-in problem {name!r}; available: {sorted(BUILTINS)}") from None


# ---------------------------------------------------------------------------
# Problems from key-value configuration

_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "minimum", "maximum", "sign",
                 "tanh", "arctan", "pi", "where", "clip")
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())


def _compile(expr: str, args: str):
    code = compile(expr, f"<{args}: {expr}>", "eval")

    def fn(*values):
        env = dict(_EXPR_NAMESPACE)
        for name, val in zip(args.split(","), values):
            val = np.asarray(val, dtype=float)
            env[name] = np.moveaxis(val, -1, 0) if name in ("x", "u") else val
        out = eval(code, {"__builtins__": {}}, env)
        if isinstance(out, tuple):
            out = np.stack(np.broadcast_arrays(*[np.asarray(o, dtype=float) for o in out]), axis=-1)
        return out

    return fn


def problem_from_config(cfg: dict) -> tuple[Problem, ExactSolution | None]:
    """Build a problem from string-valued configuration entries.

    Expressions use ``x[i]``, ``u[i]`` and ``t`` with numpy functions;
    vector dynamics are written as a comma-separated tuple, e.g.
    ``dynamics = (u[0], x[0]**2)``. Required keys: ``dynamics``,
    ``terminal_cost``, ``lower``, ``upper``. An ``exact_value`` expression in
    ``x`` and ``t`` enables error studies.
    """
    try:
        lower, upper = _floats(cfg["lower"]), _floats(cfg["upper"])
        dyn = cfg["dynamics"]
        term = cfg["terminal_cost"]
    except KeyError as exc:
        raise ValueError(f"problem configuration is missing key {exc.args[0]!r}") from None
    dim = len(lower)
    f_expr = _compile(dyn, "x,t,u")

    def dynamics(x, t, u):
        out = np.asarray(f_expr(x, t, u), dtype=float)
        if dim == 1 and (out.ndim == 0 or out.shape[-1:] != (1,)):
            out = out[..., None]
        return out

    problem = Problem(
        name=cfg.get("name", "custom"),
        dim=dim,
        dynamics=dynamics,
        running_cost=_compile(cfg.get("running_cost", "0.0"), "x,t,u"),
        terminal_cost=_compile(term, "x"),
        discount=float(cfg.get("discount", 0.0)),
        t0=float(cfg.get("t0", 0.0)),
        T=float(cfg.get("T", 1.0)),
        domain_lower=lower,
        domain_upper=upper,
        control_lower=_floats(cfg.get("control_lower", "-1")),
        control_upper=_floats(cfg.get("control_upper", "1")),
        solve_lower=_floats(cfg["solve_lower"]) if "solve_lower" in cfg else None,
        solve_upper=_floats(cfg["solve_upper"]) if "solve_upper" in cfg else None,
    )
    exact = None
    if "exact_value" in cfg:
        exact = ExactSolution(_compile(cfg["exact_value"], "x,t"))
    return problem, exact


# ---------------------------------------------------------------------------
# Controls


@dataclass(frozen=True)
class ControlGrid:
    """Finite lattice of control values in lexicographic order."""

    points: Array  # (m, c)
    counts: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.points)


def sample_control_grid(problem: Problem, counts) -> ControlGrid:
    counts = tuple(int(c) for c in np.atleast_1d(counts))
    if len(counts) == 1 and problem.control_dim > 1:
        counts = counts * problem.control_dim
    if len(counts) != problem.control_dim:
        raise ValueError(f"expected {problem.control_dim} control counts, got {len(counts)}")
    if any(c < 1 for c in counts):
        raise ValueError("control counts must be >= 1")
    lo, hi = problem.control_box
    axes = [np.linspace(lo[k], hi[k], c) if c > 1 else np.array([0.5 * (lo[k] + hi[k])])
            for k, c in enumerate(counts)]
    points = np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, problem.control_dim)
    points.setflags(write=False)
    return ControlGrid(points, counts)


@dataclass(frozen=True)
class ControlSignal:
    """Control ``s -> u(s)`` on ``[t0, T]``.

    ``breakpoints`` lists discontinuities (used to split quadrature);
    ``lipschitz`` is an optional declared Lipschitz constant.
    """

    func: Callable
    control_dim: int = 1
    breakpoints: tuple[float, ...] = ()
    lipschitz: float | None = None

    def __call__(self, s) -> Array:
        s = np.asarray(s, dtype=float)
        out = np.asarray(self.func(s), dtype=float)
        if out.shape == s.shape:
            out = out[..., None]
        return np.broadcast_to(out, s.shape + (self.control_dim,))

    @classmethod
    def constant(cls, value) -> "ControlSignal":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(lambda s: np.broadcast_to(value, np.shape(s) + value.shape), value.size, (), 0.0)

    @classmethod
    def tabulated(cls, times, values) -> "ControlSignal":
        """Dense table with nearest-sample lookup."""
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float).reshape(times.size, -1)

        def func(s):
            i = np.clip(np.searchsorted(times, s), 1, times.size - 1)
            i = np.where(np.abs(s - times[i - 1]) <= np.abs(times[i] - s), i - 1, i)
            return values[i]

        return cls(func, values.shape[1])


@dataclass(frozen=True)
class ControlSequence:
    samples: Array  # (N_t + 1, c)
    time_grid: object = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] != self.time_grid.steps + 1:
            raise ValueError(f"control sequence needs {self.time_grid.steps + 1} samples, got {s.shape[0]}")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_signal(cls, signal: ControlSignal, time_grid) -> "ControlSequence":
        return cls(signal(time_grid.times), time_grid)

    @classmethod
    def constant(cls, value, time_grid) -> "ControlSequence":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.tile(value, (time_grid.steps + 1, 1)), time_grid)


def control_oscillation(signal: ControlSignal, time_grid, samples_per_interval: int = 256) -> float:
    """Sampled ``max_n max_{s in [t_n, t_{n+1})} ||u(s) - u(t_n)||_inf``.

    Each subinterval is sampled at ``samples_per_interval`` equispaced
    points including its right end approached from the left (1e-9 of a step,
    clear of the snapping tolerance of ``TimeGrid.level``).
    """
    if samples_per_interval < 64:
        raise ValueError("use at least 64 samples per interval")
    times = time_grid.times
    frac = np.linspace(0.0, 1.0, samples_per_interval)
    frac[-1] = 1.0 - 1e-9
    s = times[:-1, None] + frac[None, :] * time_grid.dt
    u = signal(s)
    u0 = signal(times[:-1])
    return float(np.max(np.abs(u - u0[:, None, :])))


# ---------------------------------------------------------------------------
# Hypothesis audit


@dataclass(frozen=True)
class HypothesisEstimates:
    """Sampled lower bounds of the bound/Lipschitz constants (sup-norm throughout)."""

    M_f: float
    L_f_state: float
    L_f_time: float
    L_f_control: float
    M_g: float
    L_g_state: float
    L_g_time: float
    L_g_control: float
    L_psi: float
    M_psi: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _partner(rng, a, lo, hi):
    """Half local perturbations at log-uniform scales, half independent draws."""
    n, k = a.shape
    width = hi - lo
    far = lo + rng.random((n, k)) * width
    scale = width * 10.0 ** (-6.0 * rng.random((n, 1)))
    near = np.clip(a + scale * rng.uniform(-1.0, 1.0, (n, k)), lo, hi)
    return np.where(rng.random((n, 1)) < 0.5, near, far)


def _quotients(num, den):
    ok = den > 0
    return float(np.max(num[ok] / den[ok])) if np.any(ok) else 0.0


def hypothesis_audit(problem: Problem, domain_box=None, sample_count: int = 10_000,
                     seed: int = 0) -> HypothesisEstimates:
    """Monte-Carlo estimates of the constants in the standing hypotheses.

    Bounds are maxima of sampled norms, Lipschitz constants maxima of
    difference quotients over pairs differing in one argument block. Both
    are lower bounds of the true constants.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    rng = np.random.default_rng(seed)
    lo, hi = domain_box if domain_box is not None else problem.domain
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    ulo, uhi = problem.control_box
    tlo, thi = np.array([problem.t0]), np.array([problem.T])
    n = sample_count

    x = lo + rng.random((n, problem.dim)) * (hi - lo)
    t = tlo + rng.random((n, 1)) * (thi - tlo)
    u = ulo + rng.random((n, problem.control_dim)) * (uhi - ulo)
    x2 = _partner(rng, x, lo, hi)
    t2 = _partner(rng, t, tlo, thi)
    u2 = _partner(rng, u, ulo, uhi)
    ts, ts2 = t[:, 0], t2[:, 0]

    def sup(a):
        return np.max(np.abs(a), axis=-1)

    f0 = problem.f(x, ts, u)
    g0 = problem.g(x, ts, u)
    p0 = problem.psi(x)
    p1 = problem.psi(x2)
    dx = sup(x - x2)
    dt = np.abs(ts - ts2)
    du = sup(u - u2)
    return HypothesisEstimates(
        M_f=float(max(sup(f0).max(), sup(problem.f(x2, ts, u)).max())),
        L_f_state=_quotients(sup(f0 - problem.f(x2, ts, u)), dx),
        L_f_time=_quotients(sup(f0 - problem.f(x, ts2, u)), dt),
        L_f_control=_quotients(sup(f0 - problem.f(x, ts, u2)), du),
        M_g=float(np.max(np.abs(g0))),
        L_g_state=_quotients(np.abs(g0 - problem.g(x2, ts, u)), dx),
        L_g_time=_quotients(np.abs(g0 - problem.g(x, ts2, u)), dt),
        L_g_control=_quotients(np.abs(g0 - problem.g(x, ts, u2)), du),
        L_psi=_quotients(np.abs(p0 - p1), dx),
        M_psi=float(max(np.abs(p0).max(), np.abs(p1).max())),
    )
