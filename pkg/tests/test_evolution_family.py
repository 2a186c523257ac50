import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from nondense.errors import ContractionFailure, DimensionMismatch, OutOfSpan
from nondense.evolution_family import (
    build_family,
    cocycle_residual,
    constant_perturbation,
    exp_bound_estimate,
    from_function,
    periodic_perturbation,
    propagate,
    zero_perturbation,
)
from nondense.operator_core import LambdaSchedule, TimeGrid, matrix_operator
from nondense.parabolic import SPECTRAL, ParabolicOperator

from oracles import matrix_ode_propagator, random_periodic_system


def test_zero_perturbation_is_semigroup(scalar):
    t = build_family(scalar, zero_perturbation(scalar), TimeGrid(0.0, 1.0, 0.1))
    assert t.block(10, 0)[0, 0] == pytest.approx(math.exp(-1), abs=1e-14)


def test_constant_shift_matches_expm(saddle):
    B = constant_perturbation(saddle, 0.1 * np.eye(2))
    t = build_family(saddle, B, TimeGrid(0.0, 2.0, 0.05), mode="dense")
    U = t.block(20, 0)
    np.testing.assert_allclose(U, np.diag([math.exp(-0.9), math.exp(1.1)]), rtol=1e-13)
    assert abs(t.omega_hat - 1.1) <= 0.05


def test_periodic_against_dop853():
    A = np.array([[-1.0, 0.3], [0.0, 1.0]])
    J = np.array([[0.0, 1.0], [-1.0, 0.0]])
    op = matrix_operator(A)
    pert = periodic_perturbation(op, lambda t: 0.2 * math.sin(2 * math.pi * t) * J, 1.0)
    t = build_family(op, pert, TimeGrid(0.0, 2.0, 0.05))
    ref = matrix_ode_propagator(A, lambda s: 0.2 * math.sin(2 * math.pi * s) * J, 0.0, 2.0)
    assert np.max(np.abs(t.block(t.n, 0) - ref)) <= 1e-6


def test_schedule_limit_agrees_with_exact(saddle):
    B = constant_perturbation(saddle, [[0.0, 0.2], [0.1, 0.0]])
    grid = TimeGrid(0.0, 1.0, 0.1)
    exact = build_family(saddle, B, grid)
    sched = LambdaSchedule(1e3, max_terms=10, rel_tol=1e-9)
    lim = build_family(saddle, B, grid, schedule=sched, limit="schedule")
    assert np.max(np.abs(exact.block(10, 0) - lim.block(10, 0))) <= 1e-8


def test_boundary_model_needs_lift_in_table():
    p_op = ParabolicOperator(N=8, backend=SPECTRAL, alpha=0.0)
    op = p_op.model()
    M = np.zeros((op.x_dim, op.state_dim))
    M[0, 0] = 0.5                       # boundary flux driven by the mean
    B = constant_perturbation(op, M)
    t = build_family(op, B, TimeGrid(0.0, 0.5, 0.05))
    gen = op.part + op.injection @ M
    np.testing.assert_allclose(t.block(t.n, 0), sla.expm(0.5 * gen), atol=1e-6)


def test_cocycle_on_matrix_backend(saddle):
    B = from_function(saddle, lambda t: 0.1 * np.array([[math.cos(t), 0.0], [0.5, 0.0]]))
    t = build_family(saddle, B, TimeGrid(0.0, 3.0, 0.05))
    assert cocycle_residual(t, n_triples=300, off_node=20) <= 1e-8


def test_propagate(saddle, saddle_table):
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(propagate(saddle_table, 1.0, 1.0, x), x)
    on_node = propagate(saddle_table, 1.0, 0.5, x)
    np.testing.assert_allclose(on_node, saddle_table.block(
        saddle_table.grid.index(1.0), saddle_table.grid.index(0.5)) @ x, rtol=1e-15)
    a = propagate(saddle_table, 0.93, 0.12, x)
    b = propagate(saddle_table, 0.93, 0.51, propagate(saddle_table, 0.51, 0.12, x))
    assert np.max(np.abs(a - b)) <= 1e-12
    with pytest.raises(OutOfSpan):
        propagate(saddle_table, 30.0, 0.0, x)


def test_exp_bound_estimates(scalar, saddle):
    t = build_family(scalar, zero_perturbation(scalar), TimeGrid(0.0, 3.0, 0.1))
    m, w = exp_bound_estimate(t)
    assert m == pytest.approx(1.0, abs=1e-8) and w == pytest.approx(-1.0, abs=1e-8)
    t2 = build_family(saddle, zero_perturbation(saddle), TimeGrid(0.0, 3.0, 0.1))
    assert exp_bound_estimate(t2)[1] == pytest.approx(1.0, abs=1e-8)


def test_contraction_failure_on_huge_step(saddle):
    B = constant_perturbation(saddle, 50.0 * np.eye(2))
    with pytest.raises(ContractionFailure):
        build_family(saddle, B, TimeGrid(0.0, 1.0, 0.5))


def test_perturbation_shape_checked(saddle):
    bad = from_function(saddle, lambda t: np.zeros((3, 2)), sup_b=0.0)
    with pytest.raises(DimensionMismatch):
        bad.matrix(0.0)


def test_table_csv_roundtrip(tmp_path, scalar):
    t = build_family(scalar, zero_perturbation(scalar), TimeGrid(0.0, 0.2, 0.1))
    path = t.to_csv(tmp_path / "table.csv")
    rows = path.read_text().splitlines()
    assert rows[0].split(",")[:4] == ["i", "j", "t_i", "t_j"]
    assert len(rows) == 1 + 6


@given(st.integers(0, 10_000))
@settings(max_examples=5, deadline=None)
def test_random_periodic_4x4_against_dop853(seed):
    A, B = random_periodic_system(seed)
    op = matrix_operator(A)
    t = build_family(op, periodic_perturbation(op, B, 1.0), TimeGrid(0.0, 1.0, 0.05))
    ref = matrix_ode_propagator(A, B, 0.0, 1.0)
    assert np.max(np.abs(t.block(t.n, 0) - ref)) / max(1.0, np.max(np.abs(ref))) <= 1e-6
