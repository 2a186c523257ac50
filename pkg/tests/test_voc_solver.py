import math

import numpy as np
import pytest

from nondense.errors import ActionUnavailable, NotX0Valued
from nondense.evolution_family import constant_perturbation, zero_perturbation
from nondense.operator_core import LambdaSchedule, TimeGrid
from nondense.parabolic import GRID, SPECTRAL, ParabolicOperator
from nondense.voc_solver import mild_residual, solve_ivp_direct, solve_ivp_resolvent

GRID01 = TimeGrid(0.0, 1.0, 0.05)


def test_homogeneous(saddle, schedule):
    x0 = np.array([1.0, 0.5])
    tr = solve_ivp_resolvent(saddle, zero_perturbation(saddle), lambda t: np.zeros(2),
                             0.0, x0, GRID01, schedule)
    np.testing.assert_allclose(tr.at(1.0), [math.exp(-1), 0.5 * math.e], rtol=1e-13)


def test_scalar_closed_form(scalar, schedule):
    tr = solve_ivp_resolvent(scalar, zero_perturbation(scalar), lambda t: np.ones(1),
                             0.0, [0.0], GRID01, schedule)
    assert tr.at(1.0)[0] == pytest.approx(1 - math.exp(-1), abs=1e-8)


def test_diagonal_closed_form(saddle, schedule):
    tr = solve_ivp_resolvent(saddle, zero_perturbation(saddle), lambda t: np.ones(2),
                             0.0, [0.0, 0.0], GRID01, schedule)
    np.testing.assert_allclose(tr.at(0.5), [1 - math.exp(-0.5), math.exp(0.5) - 1],
                               atol=1e-8)


def test_direct_equals_resolvent_on_x0_forcing(saddle, schedule):
    B = constant_perturbation(saddle, [[0.0, 0.1], [0.2, 0.0]])
    f = lambda t: np.array([1.0 + t - t ** 2, 0.5 * t ** 3])  # noqa: E731
    a = solve_ivp_direct(saddle, B, f, 0.0, [0.3, 0.1], GRID01)
    b = solve_ivp_resolvent(saddle, B, f, 0.0, [0.3, 0.1], GRID01, schedule)
    assert np.max(np.abs(a.values - b.values)) <= 1e-6


def test_direct_rejects_boundary_forcing():
    op = ParabolicOperator(N=6, backend=SPECTRAL).model()
    f = lambda t: np.concatenate([[1.0, 0.0], np.zeros(6)])  # noqa: E731
    with pytest.raises(NotX0Valued):
        solve_ivp_direct(op, zero_perturbation(op), f, 0.0, np.zeros(6), GRID01)


def test_mild_residual_and_sensitivity(scalar, schedule):
    f = lambda t: np.ones(1)  # noqa: E731
    tr = solve_ivp_resolvent(scalar, zero_perturbation(scalar), f, 0.0, [0.0], GRID01,
                             schedule)
    r = mild_residual(scalar, zero_perturbation(scalar), f, tr)
    assert np.max(r) <= 1e-8
    tr.values[10] += 0.1
    r2 = mild_residual(scalar, zero_perturbation(scalar), f, tr)
    assert r2[10] > 0.05


def test_mild_residual_zero(saddle, schedule):
    f = lambda t: np.zeros(2)  # noqa: E731
    tr = solve_ivp_resolvent(saddle, zero_perturbation(saddle), f, 0.0, [0.0, 0.0], GRID01,
                             schedule)
    np.testing.assert_array_equal(tr.values, 0.0)
    assert np.max(mild_residual(saddle, zero_perturbation(saddle), f, tr)) == 0.0


def test_boundary_forcing_on_grid_backend():
    # flux ramped up from zero into a cold rod: the mean is the integrated flux
    p_op = ParabolicOperator(N=20, backend=GRID)
    op = p_op.model()
    f = lambda t: np.concatenate([[t, 0.0], np.zeros(20)])  # noqa: E731
    grid = TimeGrid(0.0, 0.5, 0.01)
    sched = LambdaSchedule(1e4, max_terms=8, rel_tol=1e-6)
    tr = solve_ivp_resolvent(op, zero_perturbation(op), f, 0.0, np.zeros(20), grid, sched)
    assert np.mean(tr.at(0.5)) == pytest.approx(0.125, abs=1e-6)
    r = mild_residual(op, zero_perturbation(op), f, tr)
    assert np.max(r) <= 1e-4


def test_increments_halve(saddle):
    sched = LambdaSchedule(100.0, growth=2.0, max_terms=8, rel_tol=1e-12)
    with pytest.warns(UserWarning):
        tr = solve_ivp_resolvent(saddle, zero_perturbation(saddle), lambda t: np.ones(2),
                                 0.0, [0.0, 0.0], GRID01, sched)
    np.testing.assert_allclose(tr.info["ratios"], 0.5, rtol=0.2)


def test_action_unavailable():
    op = ParabolicOperator(N=50, backend=GRID).model(dynamics=False)
    tr = type("T", (), {"times": np.zeros(1), "values": np.zeros((1, 50))})
    with pytest.raises(ActionUnavailable):
        mild_residual(op, None, None, tr)


def test_trace_csv(tmp_path, scalar, schedule):
    tr = solve_ivp_resolvent(scalar, zero_perturbation(scalar), lambda t: np.ones(1), 0.0,
                             [0.0], GRID01, schedule)
    lines = tr.to_csv(tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,u0,last_lambda_increment,mild_residual"
    assert len(lines) == 22
