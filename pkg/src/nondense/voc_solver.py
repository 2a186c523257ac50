"""Inhomogeneous initial value problems by variation of constants.

    u(t) = U_B(t, t0) x0 + lim_lam int_{t0}^t U_B(t, s) lam R_lam(A) f(s) ds

The integral is accumulated cell by cell with the collocation weights stored
in the PropagatorTable, once per lambda of the schedule, and the node traces
are extrapolated in lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import ActionUnavailable, NotX0Valued, OutOfSpan
from .evolution_family import (
    PerturbationFamily,
    PropagatorTable,
    build_family,
    increments,
    map_forcing,
    sample_forcing,
)
from .operator_core import LambdaSchedule, OperatorModel, TimeGrid, lambda_limit
from .report import write_csv


@dataclass
class SolutionTrace:
    grid: TimeGrid
    values: np.ndarray                  # (n + 1, N)
    lambda_errors: np.ndarray           # (n + 1, n_increments)
    mild_residual: Optional[np.ndarray] = None
    lambdas: np.ndarray = field(default_factory=lambda: np.array([]))
    accepted: bool = True
    info: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def uniformity(self) -> float:
        """Max over nodes of the last lambda increment."""
        if self.lambda_errors.size == 0:
            return 0.0
        return float(np.max(self.lambda_errors[:, -1]))

    def at(self, t: float) -> np.ndarray:
        i = self.grid.index(t)
        if i is None:
            raise OutOfSpan(f"t = {t} is not a trace node")
        return self.values[i]

    def to_csv(self, path):
        N = self.values.shape[1]
        header = ["t"] + [f"u{k}" for k in range(N)] + [
            "last_lambda_increment", "mild_residual"]
        last = (self.lambda_errors[:, -1] if self.lambda_errors.size
                else np.zeros(len(self.values)))
        res = (self.mild_residual if self.mild_residual is not None
               else np.full(len(self.values), math.nan))
        rows = ([t, *v, e, r] for t, v, e, r in zip(self.times, self.values, last, res))
        return write_csv(path, header, rows)


def _table_for(op, pert, grid, table, order=4):
    if table is not None:
        if table.grid != grid:
            raise ValueError("table grid differs from the solution grid")
        return table
    return build_family(op, pert, grid, order=order, mode="compressed")


def _accumulate(table: PropagatorTable, x0: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = np.empty((table.n + 1, table.N))
    out[0] = x0
    for i in range(table.n):
        out[i + 1] = table.steps[i] @ out[i] + w[i]
    return out


def _check_start(grid: TimeGrid, t0: float):
    if abs(t0 - grid.t_start) > 1e-12 * max(1.0, abs(t0)):
        raise OutOfSpan(f"t0 = {t0} must be the first grid node {grid.t_start}")


def solve_ivp_resolvent(op: OperatorModel, pert: PerturbationFamily, f: Callable,
                        t0: float, x0, grid: TimeGrid, schedule: LambdaSchedule,
                        table: Optional[PropagatorTable] = None) -> SolutionTrace:
    """Variation of constants with the lambda-limit taken numerically."""
    x0 = op.check_x0(x0).astype(float)
    _check_start(grid, t0)
    schedule.validate(op.omega)
    table = _table_for(op, pert, grid, table)
    F = sample_forcing(table, f)

    def evaluate(lam):
        return _accumulate(table, x0, increments(table, map_forcing(op, F, lam)))

    res = lambda_limit(evaluate, schedule)
    hist = np.array(res.history)
    per_node = np.max(np.abs(np.diff(hist, axis=0)), axis=2).T if len(hist) > 1 \
        else np.zeros((grid.n_steps + 1, 0))
    values = res.value.copy()
    values[0] = x0
    return SolutionTrace(grid, values, per_node, lambdas=res.lambdas,
                         accepted=res.accepted,
                         info={"monotone": res.monotone,
                               "ratios": res.ratios.tolist()})


def solve_ivp_direct(op: OperatorModel, pert: PerturbationFamily, f: Callable,
                     t0: float, x0, grid: TimeGrid,
                     table: Optional[PropagatorTable] = None) -> SolutionTrace:
    """u(t) = U_B(t,t0)x0 + int U_B(t,s) f(s) ds for X0-valued forcing."""
    x0 = op.check_x0(x0).astype(float)
    _check_start(grid, t0)
    table = _table_for(op, pert, grid, table)
    F = sample_forcing(table, f)
    mb = op.boundary_dim
    if mb:
        bad = np.max(np.abs(F[..., :mb]))
        if bad > 1e-12:
            raise NotX0Valued(f"forcing has boundary component {bad:.3e}")
    values = _accumulate(table, x0, increments(table, F[..., mb:]))
    return SolutionTrace(grid, values, np.zeros((grid.n_steps + 1, 0)))


def _running_integral(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    k = 5 if len(t) >= 6 else (3 if len(t) >= 4 else 1)
    spl = make_interp_spline(t, y, k=k)
    anti = spl.antiderivative()
    return anti(t) - anti(t[0])


def mild_residual(op: OperatorModel, pert: PerturbationFamily, f: Callable,
                  trace: SolutionTrace, x0=None) -> np.ndarray:
    """Per-node residual of u(t) = x + A int u + int (B u + f).

    The integral identity is checked in X.  For a descriptor backend the
    equation is assembled through the descriptor rows: the boundary rows fix
    the ghost values of int u (its domain condition), the interior rows give
    the X0 residual.  Otherwise the lifted form of the same identity is used.
    """
    if op.a_action is None:
        raise ActionUnavailable(f"{op.name}: no action of A available")
    t = trace.times
    u = trace.values
    x = u[0] if x0 is None else op.check_x0(x0)
    mb = op.boundary_dim
    Bu = np.array([pert.apply(ti, ui) for ti, ui in zip(t, u)])
    fv = np.array([op.check_x(f(ti)) for ti in t])
    rhs_x = Bu + fv                                  # X-valued integrand
    Iu = _running_integral(t, u)                     # int u, X0-valued
    Ir = _running_integral(t, rhs_x)                 # int (Bu + f), X-valued
    if op.descriptor is not None and mb:
        K = op.descriptor
        Kbb, Kbp = K[:mb, :mb], K[:mb, mb:]
        Kpb, Kpp = K[mb:, :mb], K[mb:, mb:]
        # boundary rows of  A (0, int u) + int (Bu+f)  must vanish
        ghosts = np.linalg.solve(Kbb, -(Kbp @ Iu.T + Ir[:, :mb].T)).T
        interior = ghosts @ Kpb.T + Iu @ Kpp.T + Ir[:, mb:]
    else:
        lifted = op.lifted(Ir.T).T
        interior = np.array([op.a_action(v) for v in Iu]) + lifted
    r = u - x - interior
    return np.array([op.norm0(v) for v in r])
