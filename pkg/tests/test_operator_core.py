import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nondense.errors import (
    DimensionMismatch,
    FitDegenerate,
    NegativeTime,
    ScheduleExhausted,
    SingularResolvent,
)
from nondense.operator_core import (
    LambdaSchedule,
    TimeGrid,
    approx_identity,
    composite_rule,
    descriptor_operator,
    diamond_cocycle_residual,
    diamond_convolution,
    fit_power_law,
    integrated_semigroup_apply,
    lambda_limit,
    lifted_operator,
    matrix_operator,
    phi_functions,
    resolvent_apply,
    resolvent_growth_probe,
    semigroup_apply,
    step_convolution_derivative,
)


def test_scalar_resolvent(scalar):
    assert resolvent_apply(scalar, 99.0, [1.0]) == pytest.approx([0.01], abs=1e-15)


def test_diagonal_resolvent(saddle):
    out = resolvent_apply(saddle, 2.0, [1.0, 1.0])
    np.testing.assert_allclose(out, [1 / 3, 1.0], atol=1e-15)


def test_boundary_block_toy_against_dense_solve():
    # m_b = 1, N = 1: A(0, phi) = (phi, -phi); descriptor with one ghost unknown
    K = np.array([[-1.0, 1.0], [1.0, -1.0]])
    op = descriptor_operator(K, 1, omega=0.0)
    y = np.array([1.0, 0.0])
    lam = 3.0
    E = np.diag([0.0, 1.0])
    z = np.linalg.solve(lam * E - K, y)
    np.testing.assert_allclose(resolvent_apply(op, lam, y), z[1:], atol=1e-14)


def test_resolvent_rejects_small_lambda(saddle):
    with pytest.raises(ValueError):
        resolvent_apply(saddle, 0.5, [1.0, 1.0])


def test_resolvent_near_spectrum():
    op = lifted_operator(np.diag([-1.0, 3.0]), np.zeros((2, 1)), omega=2.0,
                         spectral_points=np.array([-1.0, 3.0]))
    with pytest.raises(SingularResolvent):
        resolvent_apply(op, 3.0, [0.0, 1.0, 1.0])


def test_dimension_checks(saddle):
    with pytest.raises(DimensionMismatch):
        resolvent_apply(saddle, 2.0, [1.0, 1.0, 1.0])


def test_approx_identity_values():
    op = matrix_operator([[-1.0]])
    sched = LambdaSchedule(99.0, max_terms=2)
    with pytest.warns(ScheduleExhausted):
        _, rep = approx_identity(op, sched, [1.0])
    assert 99.0 * resolvent_apply(op, 99.0, [1.0])[0] == pytest.approx(0.99)
    assert rep.errors[0] == pytest.approx(0.01)
    op2 = matrix_operator(np.diag([-1.0, -4.0]))
    v = 100.0 * resolvent_apply(op2, 100.0, [1.0, 1.0])
    np.testing.assert_allclose(v, [100 / 101, 100 / 104])


def test_approx_identity_zero_and_first_order(saddle):
    sched = LambdaSchedule(10.0, max_terms=12, rel_tol=1e-3)
    v, rep = approx_identity(saddle, sched, [0.0, 0.0])
    assert np.all(rep.errors == 0) and np.all(v == 0)
    _, rep = approx_identity(saddle, sched, [1.0, 2.0])
    assert rep.first_order


def test_semigroup(scalar, saddle):
    assert semigroup_apply(scalar, 1.0, [1.0])[0] == pytest.approx(math.exp(-1), abs=1e-15)
    np.testing.assert_allclose(semigroup_apply(saddle, 0.5, [2.0, 2.0]),
                               [2 * math.exp(-0.5), 2 * math.exp(0.5)], rtol=1e-14)
    np.testing.assert_array_equal(semigroup_apply(saddle, 0.0, [3.0, -1.0]), [3.0, -1.0])
    with pytest.raises(NegativeTime):
        semigroup_apply(scalar, -0.1, [1.0])


def test_integrated_semigroup(scalar, saddle):
    assert integrated_semigroup_apply(scalar, 0.0, [1.0], 5.0)[0] == 0.0
    v = integrated_semigroup_apply(scalar, 1.0, [1.0], 5.0)
    assert v[0] == pytest.approx(1 - math.exp(-1), abs=1e-10)
    a = integrated_semigroup_apply(saddle, 0.3, [1.0, 1.0], 5.0, check_mu=False)
    b = integrated_semigroup_apply(saddle, 0.3, [1.0, 1.0], 50.0, check_mu=False)
    assert np.max(np.abs(a - b)) <= 1e-8


def test_diamond_convolution(scalar, saddle):
    sched = LambdaSchedule(100.0, max_terms=16, rel_tol=1e-6)
    zero = diamond_convolution(saddle, lambda s: np.zeros(2), 0.0, 1.0, sched)
    np.testing.assert_array_equal(zero, 0.0)
    v = diamond_convolution(scalar, lambda s: np.ones(1), 0.0, 1.0, sched)
    assert v[0] == pytest.approx(1 - math.exp(-1), abs=1e-8)


def test_step_input_fast_path_matches_quadrature(saddle):
    sched = LambdaSchedule(100.0, max_terms=16, rel_tol=1e-6)
    x = np.array([1.0, 0.0])
    f = lambda s: x * (0.2 <= s < 0.7)  # noqa: E731
    quad = diamond_convolution(saddle, f, 0.0, 1.0, sched, breakpoints=(0.2, 0.7))
    # derivative in t of S * (x 1_[a,c)) is the convolution itself
    fast = step_convolution_derivative(saddle, x, 0.2, 0.7, 1.0, mu=5.0)
    assert np.max(np.abs(quad - fast)) <= 1e-6


def test_step_convolution_branches(scalar):
    assert step_convolution_derivative(scalar, [1.0], 0.5, 1.0, 0.3, 5.0)[0] == 0.0
    assert step_convolution_derivative(scalar, [1.0], 0.0, 0.5, 0.25, 5.0)[0] == \
        pytest.approx(1 - math.exp(-0.25), abs=1e-9)
    assert step_convolution_derivative(scalar, [1.0], 0.0, 0.5, 1.0, 5.0)[0] == \
        pytest.approx(math.exp(-0.5) * (1 - math.exp(-0.5)), abs=1e-9)


def test_diamond_cocycle(saddle):
    sched = LambdaSchedule(100.0, max_terms=16, rel_tol=1e-6)
    f = lambda s: np.array([math.cos(s), 1.0])  # noqa: E731
    assert diamond_cocycle_residual(saddle, f, 0.6, 0.4, sched) <= 1e-7


def test_growth_probe_scalar(scalar):
    fit = resolvent_growth_probe(scalar, np.geomspace(1e4, 1e8, 9))
    assert fit.exponent == pytest.approx(1.0, abs=1e-3)
    assert fit.constant == pytest.approx(1.0, abs=2e-3)


def test_fit_needs_three_points():
    with pytest.raises(FitDegenerate):
        fit_power_law([1.0, 2.0], [1.0, 0.5])


def test_lambda_limit_richardson():
    sched = LambdaSchedule(10.0, max_terms=10, rel_tol=1e-3)
    res = lambda_limit(lambda lam: np.array([1.0 + 1.0 / lam]), sched)
    assert res.accepted and res.monotone
    assert res.value[0] == pytest.approx(1.0, abs=1e-12)


def test_schedule_exhausted_warns():
    sched = LambdaSchedule(10.0, max_terms=3, rel_tol=1e-12)
    with pytest.warns(ScheduleExhausted):
        res = lambda_limit(lambda lam: np.array([1.0 / lam]), sched)
    assert not res.accepted


def test_time_grid():
    g = TimeGrid(0.0, 1.0, 0.25)
    assert g.n_steps == 4 and g.index(0.5) == 2 and g.index(0.3) is None
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0.3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, -0.1)


@given(st.integers(1, 8), st.floats(-3, 3), st.floats(0.1, 4))
@settings(max_examples=30, deadline=None)
def test_composite_rule_exact_for_polynomials(order, a, length):
    s, w = composite_rule(a, a + length, 3, order)
    deg = 2 * order - 1
    exact = ((a + length) ** (deg + 1) - a ** (deg + 1)) / (deg + 1)
    assert np.sum(w * s ** deg) == pytest.approx(exact, rel=1e-10, abs=1e-10)


def test_phi_functions_scalar():
    z = -0.7
    phis = phi_functions(np.array([[z]]), 3)
    assert phis[0][0, 0] == pytest.approx(math.exp(z))
    assert phis[1][0, 0] == pytest.approx((math.exp(z) - 1) / z)
    assert phis[2][0, 0] == pytest.approx((math.exp(z) - 1 - z) / z ** 2)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=4), st.floats(6, 1e3))
@settings(max_examples=30, deadline=None)
def test_resolvent_identity(diag, lam):
    op = matrix_operator(np.diag(diag))
    y = np.linspace(-1, 1, len(diag))
    mu = lam + 1.0
    lhs = resolvent_apply(op, lam, y) - resolvent_apply(op, mu, y)
    rhs = (mu - lam) * resolvent_apply(op, lam, resolvent_apply(op, mu, y))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
