import math

import numpy as np
import pytest

from slhjb.dynamics import TimeGrid, piecewise_constant_extension
from slhjb.problem import (ControlSequence, ControlSignal, RiccatiOracle, control_oscillation,
                           hypothesis_audit, make_test1, make_test2, problem_from_config,
                           riccati_closed_form, sample_control_grid)


def bernoulli_p(t, lam, T=1.0):
    """Closed form of P' = lam P + P^2, P(T) = 1, via w = 1/P, w' = -lam w - 1."""
    w = (1.0 + 1.0 / lam) * np.exp(lam * (T - np.asarray(t))) - 1.0 / lam
    return 1.0 / w


def test_riccati_terminal_condition():
    problem, exact = make_test1()
    x = np.linspace(-1, 1, 11)[:, None]
    np.testing.assert_allclose(exact.value(x, problem.T), problem.psi(x), atol=1e-12)


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_riccati_oracle_matches_bernoulli_solution(lam):
    oracle = RiccatiOracle(lam, 0.0, 1.0)
    t = np.linspace(0, 1, 37)
    np.testing.assert_allclose(oracle(t), bernoulli_p(t, lam), rtol=1e-10)
    assert oracle(1.0) == 1.0


def test_riccati_closed_form_is_bounded_solution():
    t = np.linspace(0, 1, 11)
    np.testing.assert_allclose(riccati_closed_form(t), bernoulli_p(t, 1.0), rtol=1e-14)
    assert np.all(np.isfinite(riccati_closed_form(t)))


def test_test1_value_at_t0():
    _, exact = make_test1()
    assert exact.value(np.array([0.5]), 0.0) == pytest.approx(0.125 * bernoulli_p(0.0, 1.0), rel=1e-10)


def test_test2_exact_values():
    problem, exact = make_test2()
    assert exact.value(np.array([0.0, 0.0]), 1.0) == 0.0
    assert exact.value(np.array([0.0, 0.0]), 0.0) == pytest.approx(-1 / 3, abs=1e-15)
    assert exact.value(np.array([1.0, 0.0]), 0.0) == pytest.approx(-7 / 3, abs=1e-15)
    x = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    np.testing.assert_allclose(exact.value(x, problem.T), problem.psi(x), atol=1e-12)
    mirrored = x * np.array([-1.0, 1.0])
    np.testing.assert_array_equal(exact.value(x, 0.3), exact.value(mirrored, 0.3))


def test_test2_exact_solves_hjb_away_from_kink():
    # v_t + min_u (u v_x1 + x1^2 v_x2) = 0 with |u| <= 1, checked by central differences
    _, exact = make_test2()
    rng = np.random.default_rng(1)
    h = 1e-5
    for _ in range(100):
        x1 = rng.uniform(0.05, 1) * rng.choice([-1, 1])
        x = np.array([x1, rng.uniform(-1, 1)])
        t = rng.uniform(0, 0.95)
        e1, e2 = np.array([h, 0]), np.array([0, h])
        vt = (exact.value(x, t + h) - exact.value(x, t - h)) / (2 * h)
        v1 = (exact.value(x + e1, t) - exact.value(x - e1, t)) / (2 * h)
        v2 = (exact.value(x + e2, t) - exact.value(x - e2, t)) / (2 * h)
        assert abs(vt - abs(v1) + x1**2 * v2) < 1e-6


def test_control_grid_examples():
    problem, _ = make_test1()
    np.testing.assert_array_equal(sample_control_grid(problem, 3).points[:, 0], [-1, 0, 1])
    np.testing.assert_array_equal(sample_control_grid(problem, 2).points[:, 0], [-1, 1])
    two = problem_from_config({"dynamics": "(u[0], u[1])", "terminal_cost": "0*x[0]",
                               "lower": "-1,-1", "upper": "1,1",
                               "control_lower": "-1,-1", "control_upper": "1,1"})[0]
    grid = sample_control_grid(two, (2, 2))
    assert len(grid) == 4
    np.testing.assert_array_equal(grid.points, [[-1, -1], [-1, 1], [1, -1], [1, 1]])
    with pytest.raises(ValueError):
        sample_control_grid(problem, 0)


def test_control_oscillation_examples():
    tg = TimeGrid(0.0, 1.0, 10)
    assert control_oscillation(ControlSignal.constant(0.3), tg) == 0.0
    linear = ControlSignal(lambda s: s, 1, (), 1.0)
    assert control_oscillation(linear, tg) == pytest.approx(0.1, abs=1e-9)
    sine = ControlSignal(lambda s: 0.5 * np.sin(2 * np.pi * s), 1, (), math.pi)
    assert control_oscillation(sine, tg) <= math.pi * 0.1 + 1e-9


def test_own_extension_has_zero_oscillation():
    tg = TimeGrid(0.0, 1.0, 8)
    seq = ControlSequence(np.random.default_rng(2).uniform(-1, 1, 9), tg)
    assert control_oscillation(piecewise_constant_extension(seq), tg) == 0.0


def test_audit_test1():
    problem, _ = make_test1()
    est = hypothesis_audit(problem, seed=0)
    assert est.L_f_state == 0.0
    assert est.M_f <= 1.0
    assert est.L_f_control == pytest.approx(1.0)
    assert est.L_psi <= 1.0 + 1e-12


def test_audit_test2():
    problem, _ = make_test2()
    est = hypothesis_audit(problem, sample_count=100_000, seed=0)
    assert est.M_f <= 1.0
    assert 1.9 <= est.L_f_state <= 2.0
    assert est.M_g == 0.0


def test_audit_deterministic():
    problem, _ = make_test2()
    assert hypothesis_audit(problem, seed=7) == hypothesis_audit(problem, seed=7)


def test_problem_validation():
    with pytest.raises(ValueError):
        problem_from_config({"dynamics": "u[0]", "terminal_cost": "x[0]", "lower": "-1", "upper": "1",
                             "T": "0"})
    with pytest.raises(ValueError):
        problem_from_config({"dynamics": "u[0]", "terminal_cost": "x[0]", "lower": "-1", "upper": "1",
                             "discount": "-1"})
    with pytest.raises(ValueError):
        problem_from_config({"dynamics": "u[0]", "lower": "-1", "upper": "1"})


def test_config_problem_evaluates_like_builtin():
    cfg = {"dynamics": "u[0]", "running_cost": "0.5*u[0]**2", "terminal_cost": "0.5*x[0]**2",
           "lower": "-1", "upper": "1", "discount": "1", "exact_value": "0*x[0]"}
    custom, exact = problem_from_config(cfg)
    builtin1, _ = make_test1()
    x = np.linspace(-1, 1, 7)[:, None]
    u = np.array([0.4])
    np.testing.assert_allclose(custom.f(x, 0.2, u), builtin1.f(x, 0.2, u))
    np.testing.assert_allclose(custom.g(x, 0.2, u), builtin1.g(x, 0.2, u))
    np.testing.assert_allclose(custom.psi(x), builtin1.psi(x))
    assert exact is not None


def test_nonfinite_dynamics_rejected():
    custom, _ = problem_from_config({"dynamics": "1/x[0]", "terminal_cost": "x[0]",
                                     "lower": "-1", "upper": "1"})
    with np.errstate(divide="ignore"):
        with pytest.raises(FloatingPointError):
            custom.f(np.array([[0.0]]), 0.0, np.array([0.0]))
