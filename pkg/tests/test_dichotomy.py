import math

import numpy as np
import pytest

from nondense.dichotomy import (
    GreenFunction,
    admissibility_probe,
    bounded_solution,
    floquet_split,
    invariance_check,
    optimal_chat,
    persistence_solve,
    restrict_table,
    spectral_split_autonomous,
    subspace_split,
    trial_battery,
    verify_dichotomy,
    green_apply,
)
from nondense.errors import (
    EtaTooLarge,
    NotContracting,
    SpectralGapMissing,
    TailBudgetExceeded,
)
from nondense.evolution_family import (
    build_family,
    constant_perturbation,
    periodic_perturbation,
    zero_perturbation,
)
from nondense.operator_core import TimeGrid, matrix_operator
from nondense.voc_solver import mild_residual

WINDOW = TimeGrid(-5.0, 5.0, 0.05)


def test_spectral_split_diagonal(saddle_split):
    np.testing.assert_allclose(saddle_split.minus(0), np.diag([0.0, 1.0]), atol=1e-15)
    assert saddle_split.kappa == pytest.approx(1.0)
    assert saddle_split.beta == pytest.approx(1.0)


def test_spectral_split_stable_scalar(scalar):
    s = spectral_split_autonomous(scalar)
    assert s.rank_unstable == 0 and s.beta == pytest.approx(1.0)
    np.testing.assert_array_equal(s.plus(0), [[1.0]])


def test_spectral_split_nonnormal():
    A = np.array([[-1.0, 5.0], [0.0, 2.0]])
    s = spectral_split_autonomous(matrix_operator(A))
    P = s.minus(0)
    np.testing.assert_allclose(P @ P, P, atol=1e-13)
    np.testing.assert_allclose(A @ P, P @ A, atol=1e-13)
    assert s.kappa >= np.linalg.norm(P, 2) > 1.0


def test_gap_missing():
    with pytest.raises(SpectralGapMissing):
        spectral_split_autonomous(matrix_operator(np.diag([0.0, 1.0])))


def test_verify_passes_and_controls_fail(saddle_table, saddle_split):
    rep = verify_dichotomy(saddle_table, saddle_split)
    assert rep.passed, rep.residuals
    assert max(rep.residuals.values()) <= 1e-8
    bad = verify_dichotomy(saddle_table, saddle_split.swapped())
    assert not bad.passed and "decay" in bad.failed
    noisy = verify_dichotomy(saddle_table, saddle_split.corrupted(1e-3))
    assert not noisy.passed


def test_report_json(saddle_table, saddle_split):
    import json
    d = json.loads(verify_dichotomy(saddle_table, saddle_split).to_json())
    assert d["pass"] is True and set(d["residuals"]) == {
        "projector", "commutation", "inverse", "decay", "projector_bound"}


def test_green_function(saddle_table, saddle_split):
    g = GreenFunction(saddle_split)
    x = np.array([1.0, 2.0])
    np.testing.assert_allclose(green_apply(g, saddle_table, 1.3, 0.4, x),
                               [math.exp(-0.9), 0.0], atol=1e-12)
    np.testing.assert_allclose(green_apply(g, saddle_table, 0.4, 1.3, x),
                               [0.0, -2 * math.exp(-0.9)], atol=1e-12)
    jumps = []
    for h in (1e-2, 1e-3):
        J = np.column_stack([green_apply(g, saddle_table, 0.5 + h, 0.5, e)
                             - green_apply(g, saddle_table, 0.5 - h, 0.5, e)
                             for e in np.eye(2)])
        jumps.append(np.max(np.abs(J - np.eye(2))))
    assert jumps[1] < jumps[0] and jumps[1] <= 2e-3


def test_green_scalar(scalar):
    t = build_family(scalar, zero_perturbation(scalar), TimeGrid(0.0, 3.0, 0.1))
    g = GreenFunction(spectral_split_autonomous(scalar))
    assert green_apply(g, t, 2.0, 1.0, [1.0])[0] == pytest.approx(math.exp(-1), abs=1e-13)
    assert green_apply(g, t, 1.0, 2.0, [1.0])[0] == 0.0


def test_bounded_orbit_saddle(saddle, saddle_table, saddle_split, schedule):
    f = lambda t: np.array([1.0, 1.0])  # noqa: E731
    tr = bounded_solution(saddle_table, saddle_split, saddle, f, WINDOW, schedule)
    assert np.max(np.abs(tr.values - [1.0, -1.0])) <= 1e-6
    r = mild_residual(saddle, zero_perturbation(saddle), f, tr, x0=tr.values[0])
    assert np.max(r) <= 1e-6
    assert tr.info["bound_ok"]


def test_bounded_orbit_cosine(scalar):
    table = build_family(scalar, zero_perturbation(scalar), TimeGrid(-25.0, 25.0, 0.05))
    split = spectral_split_autonomous(scalar)
    tr = bounded_solution(table, split, scalar, lambda t: np.array([math.cos(t)]), WINDOW,
                          limit="exact")
    ref = (np.cos(WINDOW.nodes) + np.sin(WINDOW.nodes)) / 2
    assert np.max(np.abs(tr.values[:, 0] - ref)) <= 1e-8


def test_weighted_bound_at_half_beta(saddle, saddle_split):
    table = build_family(saddle, zero_perturbation(saddle), TimeGrid(-60.0, 60.0, 0.05))
    f = lambda t: np.array([math.cos(t), 1.0])  # noqa: E731
    tr = bounded_solution(table, saddle_split, saddle, f, WINDOW, eta=0.5, tol=1e-6,
                          limit="exact")
    assert tr.info["weighted_ratio"] <= 2 * tr.info["chat"]


def test_tail_budget_and_eta(saddle, saddle_split):
    table = build_family(saddle, zero_perturbation(saddle), TimeGrid(-8.0, 8.0, 0.05))
    f = lambda t: np.ones(2)  # noqa: E731
    with pytest.raises(TailBudgetExceeded):
        bounded_solution(table, saddle_split, saddle, f, WINDOW, limit="exact")
    with pytest.raises(EtaTooLarge):
        bounded_solution(table, saddle_split, saddle, f, WINDOW, eta=1.0, limit="exact")


def test_invariance(saddle, saddle_table, saddle_split, schedule):
    f = lambda t: np.array([math.sin(t), 1.0])  # noqa: E731
    assert invariance_check(saddle_split, saddle_table, saddle, f, schedule, 1.0, 1.0) == 0
    good = invariance_check(saddle_split, saddle_table, saddle, f, schedule, 2.0, -2.0)
    assert good <= 1e-10
    bad1 = invariance_check(saddle_split.corrupted(1e-2), saddle_table, saddle, f,
                            schedule, 2.0, -2.0)
    bad2 = invariance_check(saddle_split.corrupted(2e-2), saddle_table, saddle, f,
                            schedule, 2.0, -2.0)
    assert bad1 > 1e3 * good
    assert 1.5 < bad2 / bad1 < 2.5


def test_floquet_split_periodic():
    A = np.diag([-1.0, 1.0])
    J = np.array([[0.0, 1.0], [-1.0, 0.0]])
    op = matrix_operator(A)
    pert = periodic_perturbation(op, lambda t: 0.05 * math.cos(2 * math.pi * t) * J, 1.0)
    table = build_family(op, pert, TimeGrid(-10.0, 10.0, 0.05))
    split = floquet_split(table, 1.0)
    assert verify_dichotomy(table, split, tol=1e-8).passed


def test_subspace_split_matches_spectral(saddle_table, saddle_split):
    s = subspace_split(saddle_table, 1)
    sub = s.restrict(WINDOW)
    i = saddle_table.grid.index(0.0)
    np.testing.assert_allclose(s.minus(i), saddle_split.minus(0), atol=1e-12)
    assert verify_dichotomy(restrict_table(saddle_table, WINDOW), sub).passed


def test_chat_scalar(scalar):
    table = build_family(scalar, zero_perturbation(scalar), TimeGrid(-20.0, 20.0, 0.1))
    c, nu, tau = optimal_chat(table, spectral_split_autonomous(scalar))
    assert c == pytest.approx(2.0, rel=1e-6) and nu == 0.0


def test_admissibility_verdicts(saddle):
    w = TimeGrid(-20.0, 20.0, 0.1)
    trials = trial_battery(saddle, n=4)
    assert admissibility_probe(saddle, zero_perturbation(saddle), w, None, trials).solvable
    flat = matrix_operator(np.diag([0.0, 1.0]))
    v = admissibility_probe(flat, zero_perturbation(flat), w, None, trial_battery(flat, 4))
    assert v.verdict == "ILL-POSED"


def test_admissibility_small_periodic(saddle):
    J = np.array([[0.0, 1.0], [-1.0, 0.0]])
    pert = periodic_perturbation(saddle, lambda t: 0.05 * math.cos(2 * math.pi * t) * J, 1.0)
    w = TimeGrid(-20.0, 20.0, 0.1)
    v = admissibility_probe(saddle, pert, w, None, trial_battery(saddle, 4))
    assert v.solvable


def _scalar_setup():
    op = matrix_operator([[-1.0]])
    B = zero_perturbation(op)
    table = build_family(op, B, TimeGrid(-20.0, 20.0, 0.1), mode="compressed")
    return op, B, table, spectral_split_autonomous(op)


def test_persistence_scalar_shift():
    op, B, table, split = _scalar_setup()
    C = constant_perturbation(op, [[0.1]])
    res = persistence_solve(op, B, C, split, table, TimeGrid(-5.0, 5.0, 0.1))
    assert res.passed and res.q == pytest.approx(0.4, rel=1e-6)
    assert res.report.beta_fit == pytest.approx(0.9, abs=0.02)
    assert res.uniqueness_gap <= 10 * 1e-11


def test_persistence_identity_and_refusal():
    op, B, table, split = _scalar_setup()
    res = persistence_solve(op, B, B, split, table, TimeGrid(-5.0, 5.0, 0.1))
    assert res.q == 0.0 and res.passed
    np.testing.assert_array_equal(res.split.minus(0), split.minus(0))
    with pytest.raises(NotContracting):
        persistence_solve(op, B, constant_perturbation(op, [[0.5]]), split, table,
                          TimeGrid(-5.0, 5.0, 0.1))


def test_verified_implies_admissible(saddle, saddle_table, saddle_split):
    assert verify_dichotomy(saddle_table, saddle_split).passed
    v = admissibility_probe(saddle, zero_perturbation(saddle), TimeGrid(-20.0, 20.0, 0.1),
                            None, trial_battery(saddle, 10, seed=3))
    assert v.solvable
