import dataclasses
import itertools

import numpy as np
import pytest

from slhjb.dynamics import TimeGrid
from slhjb.grid import OutOfDomainError, build_grid, interpolate_values, make_grid
from slhjb.problem import ControlSequence, hypothesis_audit, make_test1, make_test2, sample_control_grid
from slhjb.cost import semidiscrete_cost
from slhjb.solver import (EnumerationBudgetError, check_invariance, closed_loop_simulate,
                          enumerate_min_cost, feedback_control, semidiscrete_value, solve,
                          write_value_csv)

from conftest import simple_problem


def naive_solve(problem, grid, tg, controls, policy="clamp"):
    """Direct transcription of the backward recursion with numpy interpolation."""
    nodes = grid.nodes()
    layers = [problem.psi(nodes)]
    q = 1.0 - problem.discount * tg.dt
    for n in range(tg.steps - 1, -1, -1):
        cands = [tg.dt * problem.g(nodes, tg.times[n], u)
                 + q * interpolate_values(grid, layers[0], nodes + tg.dt * problem.f(nodes, tg.times[n], u), policy)
                 for u in controls.points]
        layers.insert(0, np.min(cands, axis=0))
    return np.array(layers)


def generic(problem):
    return dataclasses.replace(problem, compiled=None, foot_box=None)


def random_problem(rng, dim, psi_vals=None, discount=None):
    a = rng.normal(size=dim)
    lam = rng.uniform(0, 1) if discount is None else discount

    def f(x, t, u):
        return np.sin(x @ a + t)[..., None] * 0.5 + u[..., :1] * np.ones(dim)

    def g(x, t, u):
        return (x**2).sum(-1) * 0.3 + u[..., 0] ** 2

    return simple_problem(dim=dim, f=f, g=g, psi=psi_vals, discount=lam)


def test_terminal_layer_is_nodal_psi():
    problem, _ = make_test2()
    grid = build_grid(*problem.solve_box, 0.2)
    tg = TimeGrid.from_dt(0, 1, 0.2)
    V, _ = solve(problem, grid, tg, sample_control_grid(problem, 3), prune=False)
    np.testing.assert_array_equal(V.layers[-1], problem.psi(grid.nodes()))


def test_constant_problem_is_invariant():
    const = simple_problem(dim=2, psi=lambda x: np.full(x.shape[:-1], 1.7),
                           f=lambda x, t, u: np.stack(np.broadcast_arrays(u[..., 0], -x[..., 1]), -1))
    grid = make_grid([-1, -1], [1, 1], [7, 5])
    V, P = solve(const, grid, TimeGrid(0, 1, 6), sample_control_grid(const, 4))
    np.testing.assert_array_equal(V.layers, 1.7)
    np.testing.assert_array_equal(P.indices, 0)


def test_single_step_closed_form():
    problem = simple_problem(g=lambda x, t, u: (u[..., 0] - 0.3) ** 2 + x[..., 0],
                             psi=lambda x: x[..., 0] ** 3, discount=0.8)
    grid = make_grid([-1], [1], [5])
    U = sample_control_grid(problem, 5)
    V, _ = solve(problem, grid, TimeGrid(0, 0.5, 1), U)
    x = grid.nodes()[:, 0]
    expect = 0.5 * (np.min((U.points[:, 0] - 0.3) ** 2) + x) + 0.6 * x**3
    np.testing.assert_allclose(V.layers[0], expect, atol=1e-15)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_generic_path_matches_naive_recursion(dim):
    rng = np.random.default_rng(dim)
    problem = random_problem(rng, dim, psi_vals=lambda x: np.abs(x).sum(-1))
    grid = make_grid([-1] * dim, [1] * dim, [6, 5, 4][:dim])
    tg = TimeGrid(0, 1, 5)
    U = sample_control_grid(problem, 5)
    V, _ = solve(problem, grid, tg, U)
    np.testing.assert_allclose(V.layers, naive_solve(problem, grid, tg, U), rtol=0, atol=1e-13)


@pytest.mark.parametrize("maker,step", [(make_test1, 0.05), (make_test2, 0.1)])
def test_fused_kernel_is_bitwise_generic(maker, step):
    problem, _ = maker()
    grid = build_grid(*problem.solve_box, step)
    tg = TimeGrid.from_dt(problem.t0, problem.T, step)
    U = sample_control_grid(problem, 11)
    Vf, Pf = solve(problem, grid, tg, U, prune=False)
    Vg, Pg = solve(generic(problem), grid, tg, U)
    np.testing.assert_array_equal(Vf.layers, Vg.layers)
    np.testing.assert_array_equal(Pf.indices, Pg.indices)


def test_pruned_solve_agrees_on_domain():
    problem, _ = make_test2()
    grid = build_grid(*problem.solve_box, 0.05)
    tg = TimeGrid.from_dt(0, 1, 0.05)
    U = sample_control_grid(problem, 41)
    full, _ = solve(problem, grid, tg, U, prune=False)
    pruned, _ = solve(problem, grid, tg, U)
    assert pruned.active is not None
    mask = grid.node_mask(*problem.domain)
    np.testing.assert_array_equal(pruned.layers[:, mask], full.layers[:, mask])
    computed = ~np.isnan(pruned.layers)
    np.testing.assert_array_equal(pruned.layers[computed], full.layers[computed])


def test_monotone_in_terminal_cost():
    rng = np.random.default_rng(10)
    for trial in range(100):
        dim = 1 + trial % 2
        grid = make_grid([-1] * dim, [1] * dim, [5] * dim)
        psi_a = rng.normal(size=grid.num_nodes)
        psi_b = psi_a + rng.random(grid.num_nodes)
        base = random_problem(rng, dim)
        pa = dataclasses.replace(base, terminal_cost=lambda x, v=psi_a: interpolate_values(grid, v, x))
        pb = dataclasses.replace(base, terminal_cost=lambda x, v=psi_b: interpolate_values(grid, v, x))
        tg = TimeGrid(0, 1, 4)
        U = sample_control_grid(base, 3)
        Va, _ = solve(pa, grid, tg, U)
        Vb, _ = solve(pb, grid, tg, U)
        assert np.all(Va.layers <= Vb.layers)


def test_discounted_contraction():
    rng = np.random.default_rng(11)
    for trial in range(100):
        dim = 1 + trial % 2
        grid = make_grid([-1] * dim, [1] * dim, [5] * dim)
        psi_a = rng.normal(size=grid.num_nodes)
        psi_b = rng.normal(size=grid.num_nodes)
        base = random_problem(rng, dim)
        base = dataclasses.replace(base, running_cost=lambda x, t, u: np.zeros(
            np.broadcast_shapes(x.shape[:-1], u.shape[:-1])))
        pa = dataclasses.replace(base, terminal_cost=lambda x, v=psi_a: interpolate_values(grid, v, x))
        pb = dataclasses.replace(base, terminal_cost=lambda x, v=psi_b: interpolate_values(grid, v, x))
        tg = TimeGrid(0, 1, 4)
        U = sample_control_grid(base, 3)
        Va, _ = solve(pa, grid, tg, U)
        Vb, _ = solve(pb, grid, tg, U)
        q = 1 - base.discount * tg.dt
        d0 = np.max(np.abs(psi_a - psi_b))
        for n in range(tg.steps + 1):
            assert np.max(np.abs(Va.layers[n] - Vb.layers[n])) <= q ** (tg.steps - n) * d0 * (1 + 1e-12)


def test_layers_bounded_by_audit():
    problem, _ = make_test1()
    grid = build_grid(-1, 1, 0.05)
    V, _ = solve(problem, grid, TimeGrid.from_dt(0, 1, 0.05), sample_control_grid(problem, 41))
    audit = hypothesis_audit(problem, seed=0)
    assert np.max(np.abs(V.layers)) <= audit.M_g * 1.0 + audit.M_psi


def test_deterministic():
    problem, _ = make_test2()
    grid = build_grid(*problem.solve_box, 0.1)
    tg = TimeGrid.from_dt(0, 1, 0.1)
    U = sample_control_grid(problem, 21)
    a, _ = solve(problem, grid, tg, U)
    b, _ = solve(problem, grid, tg, U)
    assert a.layers.tobytes() == b.layers.tobytes()


def test_error_policy_raises_on_exit():
    problem, _ = make_test1()
    grid = build_grid(-1, 1, 0.25)
    tg = TimeGrid(0, 1, 4)
    with pytest.raises(OutOfDomainError):
        solve(problem, grid, tg, sample_control_grid(problem, 3), "error")
    with pytest.raises(OutOfDomainError):
        solve(generic(problem), grid, tg, sample_control_grid(problem, 3), "error")


def test_error_policy_passes_on_invariant_problem():
    problem = simple_problem(f=lambda x, t, u: -x * u[..., :1] ** 2, g=lambda x, t, u: u[..., 0] ** 2,
                             psi=lambda x: x[..., 0], control_lower=(0.0,))
    grid = make_grid([-1], [1], [9])
    V, _ = solve(problem, grid, TimeGrid(0, 1, 4), sample_control_grid(problem, 3), "error")
    assert np.all(np.isfinite(V.layers))


def test_bad_arguments():
    problem, _ = make_test1()
    grid = build_grid(-1, 1, 0.25)
    with pytest.raises(ValueError):
        solve(problem, grid, TimeGrid(0, 1, 4), sample_control_grid(problem, 3), "wrap")
    with pytest.raises(ValueError):
        solve(problem, grid, TimeGrid(0, 1, 1), sample_control_grid(problem, 3))  # lambda dt > 1/2
    with pytest.raises(ValueError):
        solve(problem, make_grid([-1, -1], [1, 1], [3, 3]), TimeGrid(0, 1, 4), sample_control_grid(problem, 3))


def test_semidiscrete_value():
    problem, _ = make_test1()
    tg = TimeGrid(0, 1, 3)
    U = sample_control_grid(problem, 3)
    assert semidiscrete_value(problem, [0.4], 3, tg, U) == pytest.approx(0.08)
    single = sample_control_grid(problem, 1)
    seq = ControlSequence.constant(0.0, tg)
    assert semidiscrete_value(problem, [0.4], 0, tg, single) == semidiscrete_cost(problem, [0.4], 0, seq, tg)
    brute = min(semidiscrete_cost(problem, [0.4], 0, ControlSequence(np.r_[s, 0.0], tg), tg)
                for s in itertools.product(U.points[:, 0], repeat=3))
    assert semidiscrete_value(problem, [0.4], 0, tg, U) == pytest.approx(brute, abs=1e-15)
    const = simple_problem(psi=lambda x: np.full(x.shape[:-1], 3.0))
    assert semidiscrete_value(const, [0.1], 0, tg, U) == 3.0


def test_enumeration_budget():
    problem, _ = make_test1()
    with pytest.raises(EnumerationBudgetError):
        enumerate_min_cost(problem, [[0.0]], 0, TimeGrid(0, 1, 40), sample_control_grid(problem, 10))


def test_enumeration_chunking_is_transparent():
    problem, _ = make_test1()
    tg = TimeGrid(0, 1, 4)
    U = sample_control_grid(problem, 3)
    starts = np.linspace(-1, 1, 9)[:, None]
    a = enumerate_min_cost(problem, starts, 0, tg, U)
    b = enumerate_min_cost(problem, starts, 0, tg, U, budget=81)
    np.testing.assert_array_equal(a, b)


def test_feedback_tie_breaks_to_first():
    const = simple_problem(psi=lambda x: np.full(x.shape[:-1], 1.0), f=lambda x, t, u: u + 0 * x)
    grid = make_grid([-1], [1], [5])
    V, P = solve(const, grid, TimeGrid(0, 1, 2), sample_control_grid(const, 3))
    assert feedback_control(P, V, [0.5], 0)[1] == 0
    assert feedback_control(P, V, [0.3], 0)[1] == 0


def test_feedback_prefers_zero_for_quadratic_cost():
    problem = simple_problem(g=lambda x, t, u: u[..., 0] ** 2)
    grid = make_grid([-1], [1], [5])
    V, P = solve(problem, grid, TimeGrid(0, 1, 2), sample_control_grid(problem, 5))
    u, _ = feedback_control(P, V, [0.3], 0)
    assert u[0] == 0.0


def test_feedback_tracks_riccati_control():
    problem, exact = make_test1()
    h = 0.0125
    grid = build_grid(-1, 1, h)
    tg = TimeGrid.from_dt(0, 1, h)
    U = sample_control_grid(problem, 161)
    V, P = solve(problem, grid, tg, U)
    spacing = U.points[1, 0] - U.points[0, 0]
    for x in (-0.8, -0.25, 0.0, 0.5, 0.75):
        for n in (0, 20, 60):
            u, _ = feedback_control(P, V, [x], n)
            assert abs(u[0] - float(exact.optimal_control(np.array([x]), tg.times[n])[0])) <= spacing + h


def test_invariance_report():
    still = simple_problem()
    grid = make_grid([-1], [1], [5])
    tg = TimeGrid(0, 1, 4)
    assert check_invariance(still, grid, tg, sample_control_grid(still, 3)).ok
    problem, _ = make_test1()
    rep = check_invariance(problem, grid, tg, sample_control_grid(problem, 3))
    assert not rep.ok and rep.max_exit == pytest.approx(0.25)
    assert any((grid.nodes()[i, 0] == 1.0 and j == 2) for i, _, j in rep.violations)
    p2, _ = make_test2()
    g2 = make_grid([-1, -1], [1, 1], [5, 5])
    rep2 = check_invariance(p2, g2, TimeGrid(0, 1, 4), sample_control_grid(p2, 3))
    tops = g2.nodes()[rep2.violations[:, 0]]
    assert np.any((tops[:, 1] == 1.0) & (tops[:, 0] != 0.0))


def test_closed_loop_trivial():
    const = simple_problem(psi=lambda x: np.full(x.shape[:-1], 0.4))
    grid = make_grid([-1], [1], [5])
    V, P = solve(const, grid, TimeGrid(0, 1, 4), sample_control_grid(const, 3))
    traj, cost = closed_loop_simulate(const, V, P, [0.3])
    assert cost == 0.4
    np.testing.assert_array_equal(traj.states[:, 0], 0.3)


def test_closed_loop_converges():
    problem, _ = make_test1()
    gaps = []
    for h in (0.1, 0.05, 0.025):
        grid = build_grid(-1, 1, h)
        V, P = solve(problem, grid, TimeGrid.from_dt(0, 1, h), sample_control_grid(problem, grid.counts[0]))
        _, cost = closed_loop_simulate(problem, V, P, [0.5])
        gaps.append(abs(cost - float(V.value([0.5], 0))))
    assert gaps[0] > gaps[1] > gaps[2]


def test_value_csv(tmp_path):
    problem, _ = make_test1()
    grid = make_grid([-1], [1], [3])
    V, P = solve(problem, grid, TimeGrid(0, 1, 2), sample_control_grid(problem, 3))
    path = tmp_path / "v.csv"
    write_value_csv(path, V, P)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x_1,V,u_1"
    assert len(lines) == 1 + 3 * 3
    assert lines[-1] == "1.0,1.0,0.5,"
