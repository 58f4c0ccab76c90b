import math

import numpy as np
import pytest

from slhjb.dynamics import (TimeGrid, euler_trajectory, piecewise_constant_extension,
                            reference_trajectory, trajectory_divergence, write_trajectory_csv)
from slhjb.problem import ControlSequence, ControlSignal, hypothesis_audit, make_test1, make_test2

from conftest import simple_problem


def growth_problem():
    return simple_problem(f=lambda x, t, u: x + 0 * u[..., :1])


def test_time_grid_from_dt():
    tg = TimeGrid.from_dt(0.0, 1.0, 0.1)
    assert tg.steps == 10 and tg.times[-1] == 1.0
    assert TimeGrid.from_dt(0.0, 1.0, 0.3).steps == 4
    assert tg.level(0.1) == 1 and tg.level(0.15) == 1 and tg.level(1.0) == 10
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)


def test_euler_examples():
    problem, _ = make_test1()
    tg = TimeGrid.from_dt(0.0, 1.0, 0.1)
    traj = euler_trajectory(problem, [0.0], ControlSequence.constant(1.0, tg), tg)
    np.testing.assert_allclose(traj.states[:, 0], 0.1 * np.arange(11), atol=1e-15)

    still = simple_problem()
    traj = euler_trajectory(still, [0.3], ControlSequence.constant(1.0, tg), tg)
    np.testing.assert_array_equal(traj.states[:, 0], 0.3)


def test_euler_test2_hand_recursion():
    problem, _ = make_test2()
    tg = TimeGrid(0.0, 1.0, 2)
    traj = euler_trajectory(problem, [0.0, 0.0], ControlSequence.constant(1.0, tg), tg)
    np.testing.assert_allclose(traj.states, [[0, 0], [0.5, 0], [1.0, 0.125]])


def test_euler_start_level():
    problem, _ = make_test1()
    tg = TimeGrid(0.0, 1.0, 4)
    traj = euler_trajectory(problem, [0.0], ControlSequence.constant(-1.0, tg), tg, start=2)
    np.testing.assert_allclose(traj.states[:, 0], [0, -0.25, -0.5])
    np.testing.assert_array_equal(traj.times, [0.5, 0.75, 1.0])


def test_reference_linear_flow():
    problem, _ = make_test1()
    ref = reference_trajectory(problem, [0.0], ControlSignal.constant(1.0), 0.2, 0.01)
    np.testing.assert_allclose(ref.states[:, 0], ref.times - 0.2, atol=1e-12)


def test_reference_exponential_flow():
    ref = reference_trajectory(growth_problem(), [1.0], ControlSignal.constant(0.0), 0.0, 1e-4)
    assert ref.states[-1, 0] == pytest.approx(math.e, abs=1e-10)


def test_reference_respects_breakpoints():
    # u = 1 on [0, 0.5), -1 after: exact y(1) = 0 for y' = u
    problem, _ = make_test1()
    tg = TimeGrid(0.0, 1.0, 2)
    signal = piecewise_constant_extension(ControlSequence(np.array([1.0, -1.0, -1.0]), tg))
    ref = reference_trajectory(problem, [0.0], signal, 0.0, 0.3)
    assert 0.5 in ref.times
    assert abs(ref.states[-1, 0]) <= 1e-14
    assert ref.at(0.5)[0, 0] == pytest.approx(0.5, abs=1e-14)


def test_piecewise_constant_extension():
    tg = TimeGrid(0.0, 1.0, 4)
    seq = ControlSequence(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), tg)
    sig = piecewise_constant_extension(seq)
    np.testing.assert_array_equal(sig(tg.times[:-1])[:, 0], [1, 2, 3, 4])
    np.testing.assert_array_equal(sig(tg.times[:-1] + 0.125)[:, 0], [1, 2, 3, 4])
    np.testing.assert_array_equal(sig(tg.times[1:] - 1e-14)[:, 0], [1, 2, 3, 4])
    assert sig(1.0)[0] == 4.0
    const = piecewise_constant_extension(ControlSequence.constant(0.7, tg))
    np.testing.assert_array_equal(const(np.linspace(0, 1, 33)), 0.7)


def test_divergence_zero_cases():
    tg = TimeGrid.from_dt(0.0, 1.0, 0.1)
    still = simple_problem()
    seq = ControlSequence.constant(0.0, tg)
    d = trajectory_divergence(reference_trajectory(still, [0.2], ControlSignal.constant(0.0), 0.0, 0.01),
                              euler_trajectory(still, [0.2], seq, tg))
    assert d.max == 0.0
    problem, _ = make_test1()
    seq = ControlSequence.constant(0.4, tg)
    d = trajectory_divergence(reference_trajectory(problem, [0.2], ControlSignal.constant(0.4), 0.0, 0.001),
                              euler_trajectory(problem, [0.2], seq, tg))
    assert d.max <= 1e-12


def test_divergence_linear_control_matches_integral():
    # y' = s sampled at t_n: exact gap at t_n is sum of dt^2 / 2 = t_n dt / 2
    problem, _ = make_test1()
    signal = ControlSignal(lambda s: s, 1, (), 1.0)
    for steps in (5, 10, 20):
        tg = TimeGrid(0.0, 1.0, steps)
        ref = reference_trajectory(problem, [0.0], signal, 0.0, tg.dt / 100)
        d = trajectory_divergence(ref, euler_trajectory(problem, [0.0], ControlSequence.from_signal(signal, tg), tg))
        np.testing.assert_allclose(d.distances, tg.times * tg.dt / 2, atol=1e-12)
        assert d.max <= 1.0 * tg.dt + 2 * 1.0 * tg.dt


def test_lemma1_bound_and_monotone_decay():
    problem, _ = make_test1()
    audit = hypothesis_audit(problem, seed=0)
    signal = ControlSignal(lambda s: 0.5 * np.sin(2 * np.pi * s), 1, (), math.pi)
    prev = math.inf
    for steps in (10, 20, 40, 80):
        tg = TimeGrid(0.0, 1.0, steps)
        ref = reference_trajectory(problem, [0.5], signal, 0.0, tg.dt / 100)
        d = trajectory_divergence(ref, euler_trajectory(problem, [0.5], ControlSequence.from_signal(signal, tg), tg))
        m_u = max(abs(0.5 * np.sin(2 * np.pi * s) - 0.5 * np.sin(2 * np.pi * tg.times[int(s / tg.dt)]))
                  for s in np.linspace(0, 1 - 1e-9, 4001))
        assert d.max <= audit.L_f_control * m_u + 2 * audit.M_f * tg.dt + 1e-8
        assert d.max <= prev
        prev = d.max


def test_divergence_rejects_mismatched_horizon():
    problem, _ = make_test1()
    tg = TimeGrid(0.0, 1.0, 4)
    ref = reference_trajectory(problem, [0.0], ControlSignal.constant(0.0), 0.5, 0.01)
    with pytest.raises(ValueError):
        trajectory_divergence(ref, euler_trajectory(problem, [0.0], ControlSequence.constant(0.0, tg), tg))


def test_trajectory_csv(tmp_path):
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, [0.0, 0.5], [[0.0, 1.0], [0.1, 1.2]], [[1.0], [1.0]])
    lines = path.read_text().splitlines()
    assert lines[0] == "t,y_1,y_2,u_1"
    assert lines[2] == "0.5,0.1,1.2,1.0"
