"""Evolution family of the perturbed homogeneous problem.

U_B(t, s) is the fixed point of

    U(t, s)x = T(t - s)x + lim_lam int_s^t T(t - r) lam R_lam(A) B(r) U(r, s)x dr.

In the lifted model lam R_lam(A) -> [L | I] =: J strongly, so the integrand
becomes T(t - r) Bt(r) U(r, s)x with the effective X0-perturbation
Bt(r) = J B(r).  Each grid cell is advanced by exponential Gauss collocation:
the stage values solve a Volterra fixed point that is iterated by Picard
sweeps, and the integrals of T against the interpolated stage forcing are
evaluated exactly through phi-functions, which keeps stiff parts (PDE modes)
harmless.  The same cell solve yields the quadrature weights used by the
variation-of-constants and bounded-orbit solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import ContractionFailure, DimensionMismatch, OutOfSpan
from .operator_core import (
    LambdaSchedule,
    OperatorModel,
    TimeGrid,
    gauss_legendre,
    lambda_limit,
    phi_functions,
    resolvent_apply,
)
from .report import write_csv

DENSE_BUDGET = 4e7  # stored floats above which "auto" switches to compressed


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True, eq=False)
class PerturbationFamily:
    """B(t) : X0 -> X as an (m_b + N) x N matrix valued function."""

    matrix_fn: Callable[[float], np.ndarray]
    x_dim: int
    state_dim: int
    sup_b: float = math.inf
    bound_fn: Optional[Callable[[float], float]] = None
    constant: bool = False
    is_zero: bool = False
    period: Optional[float] = None
    name: str = "B"

    def matrix(self, t: float) -> np.ndarray:
        M = np.asarray(self.matrix_fn(t), dtype=float)
        if M.shape != (self.x_dim, self.state_dim):
            raise DimensionMismatch(
                f"B(t) must be {self.x_dim}x{self.state_dim}, got {M.shape}")
        return M

    def apply(self, t: float, x0) -> np.ndarray:
        return self.matrix(t) @ np.asarray(x0, dtype=float)

    def bound_b(self, t: float, op: Optional[OperatorModel] = None) -> float:
        if self.bound_fn is not None:
            return float(self.bound_fn(t))
        M = self.matrix(t)
        if op is None:
            return float(np.linalg.norm(M, 2))
        return op.opnorm_x0_to_x(M)

    def lifted(self, op: OperatorModel, t: float) -> np.ndarray:
        return op.injection @ self.matrix(t)

    def minus(self, other: "PerturbationFamily", op: OperatorModel,
              samples: Optional[np.ndarray] = None) -> "PerturbationFamily":
        """C - B as a family, with sup norm measured on ``samples``."""
        fa, fb = self.matrix, other.matrix
        diff = from_function(op, lambda t: fa(t) - fb(t),
                             constant=self.constant and other.constant,
                             period=self.period if self.period == other.period else None,
                             samples=samples, name=f"{self.name}-{other.name}")
        return diff


def _sample_sup(op, fn, samples):
    return float(max(op.opnorm_x0_to_x(np.asarray(fn(t), dtype=float)) for t in samples))


def zero_perturbation(op: OperatorModel) -> PerturbationFamily:
    z = np.zeros((op.x_dim, op.state_dim))
    return PerturbationFamily(lambda t: z, op.x_dim, op.state_dim, sup_b=0.0,
                              constant=True, is_zero=True, name="zero")


def constant_perturbation(op: OperatorModel, M, name: str = "B") -> PerturbationFamily:
    M = np.asarray(M, dtype=float)
    if M.ndim == 2 and M.shape == (op.state_dim, op.state_dim) and op.boundary_dim:
        M = np.vstack([np.zeros((op.boundary_dim, op.state_dim)), M])
    M = np.atleast_2d(M)
    if M.shape != (op.x_dim, op.state_dim):
        raise DimensionMismatch(f"B must be {op.x_dim}x{op.state_dim}")
    nrm = op.opnorm_x0_to_x(M)
    return PerturbationFamily(lambda t: M, op.x_dim, op.state_dim, sup_b=nrm,
                              constant=True, is_zero=not np.any(M), name=name)


def from_function(op: OperatorModel, fn, sup_b: Optional[float] = None,
                  constant: bool = False, period: Optional[float] = None,
                  samples: Optional[np.ndarray] = None,
                  name: str = "B") -> PerturbationFamily:
    """Wrap t -> B(t).  sup_b is sampled (one period, or ``samples``) if not given."""
    if sup_b is None:
        if constant:
            samples = np.array([0.0])
        elif samples is None:
            span = period if period else 1.0
            samples = np.linspace(0.0, span, 257)
        sup_b = _sample_sup(op, fn, samples)
    return PerturbationFamily(fn, op.x_dim, op.state_dim, sup_b=sup_b,
                              constant=constant, period=period, name=name)


def periodic_perturbation(op: OperatorModel, fn, period: float,
                          name: str = "B") -> PerturbationFamily:
    return from_function(op, fn, period=period, name=name)


# ---------------------------------------------------------------------------
# one-step exponential collocation


@dataclass(frozen=True)
class StepKernel:
    h: float
    c: np.ndarray          # stage abscissae in [0, 1]
    T_stage: np.ndarray    # (Q, N, N)  T(c_q h)
    T_end: np.ndarray      # (N, N)     T(h)
    Phi: np.ndarray        # (Q, Q, N, N) stage weights
    Phi_end: np.ndarray    # (Q, N, N)  end weights


def _lagrange_monomials(c: np.ndarray) -> np.ndarray:
    V = np.vander(c, increasing=True)
    return np.linalg.inv(V)  # column k holds the monomial coefficients of l_k


def _weights_at(part: np.ndarray, h: float, tau: float, a: np.ndarray):
    """(T(tau h), [int_0^{tau h} T(tau h - r) l_k(r/h) dr]_k)."""
    Q = a.shape[0]
    phis = phi_functions(tau * h * part, Q)
    W = []
    for k in range(Q):
        acc = np.zeros_like(part)
        for m in range(Q):
            acc = acc + a[m, k] * math.factorial(m) * tau ** (m + 1) * h * phis[m + 1]
        W.append(acc)
    return phis[0], np.array(W)


@lru_cache(maxsize=256)
def _kernel_cached(op: OperatorModel, h_key: float, order: int) -> StepKernel:
    h = float(h_key)
    c, _ = gauss_legendre(order)
    a = _lagrange_monomials(c)
    part = op.part
    T_stage, Phi = [], []
    for cq in c:
        Tq, Wq = _weights_at(part, h, cq, a)
        T_stage.append(Tq)
        Phi.append(Wq)
    T_end, Phi_end = _weights_at(part, h, 1.0, a)
    return StepKernel(h, c, np.array(T_stage), T_end, np.array(Phi), Phi_end)


def step_kernel(op: OperatorModel, h: float, order: int = 4) -> StepKernel:
    op.require_dynamics()
    if not h > 0:
        raise ValueError("step length must be positive")
    return _kernel_cached(op, float(np.float64(h)), int(order))


def contraction_factor(K: StepKernel, G: np.ndarray) -> float:
    Q = len(K.c)
    rows = [sum(np.linalg.norm(K.Phi[q, k] @ G[k], 2) for k in range(Q))
            for q in range(Q)]
    return float(max(rows))


def step_maps(K: StepKernel, G: Optional[np.ndarray], picard_tol: float = 1e-13,
              max_iter: int = 200):
    """One-step map P and stage-forcing weights W (Q, N, N) of a cell.

    ``G`` holds the lifted perturbation at the stage times (or None for B = 0).
    The stage system Y = T_c U + Phi (G Y + g) is solved for all inputs at
    once by Picard iteration started from the unperturbed stage values.
    """
    Q = len(K.c)
    N = K.T_end.shape[0]
    if G is None or not np.any(G):
        return K.T_end.copy(), K.Phi_end.copy(), 0
    rho = contraction_factor(K, G)
    if rho >= 1.0:
        raise ContractionFailure(
            f"one-step Picard factor {rho:.3g} >= 1 at step {K.h:.3g}; "
            "halve the grid step", factor=rho)
    # stacked unknown: (Q*N) x (N + Q*N); columns = [U input | g_1 .. g_Q]
    M = np.zeros((Q * N, Q * N))
    R0 = np.zeros((Q * N, N + Q * N))
    for q in range(Q):
        R0[q * N:(q + 1) * N, :N] = K.T_stage[q]
        for k in range(Q):
            M[q * N:(q + 1) * N, k * N:(k + 1) * N] = K.Phi[q, k] @ G[k]
            R0[q * N:(q + 1) * N, N + k * N:N + (k + 1) * N] = K.Phi[q, k]
    Y = R0.copy()
    it = 0
    while True:
        it += 1
        Y_new = R0 + M @ Y
        diff = np.max(np.abs(Y_new - Y))
        Y = Y_new
        if diff <= picard_tol * max(1.0, np.max(np.abs(Y))):
            break
        if it >= max_iter:
            raise ContractionFailure(
                f"Picard sweeps did not settle in {max_iter} iterations", factor=rho)
    E = np.zeros((N, N + Q * N))
    E[:, :N] = K.T_end
    EG = np.zeros((N, Q * N))
    for k in range(Q):
        E[:, N + k * N:N + (k + 1) * N] = K.Phi_end[k]
        EG[:, k * N:(k + 1) * N] = K.Phi_end[k] @ G[k]
    E = E + EG @ Y
    P = E[:, :N]
    W = np.stack([E[:, N + k * N:N + (k + 1) * N] for k in range(Q)])
    return P, W, it


def _stage_lifted(op, pert, t, h, c, lam=None):
    if pert.is_zero:
        return None
    Gs = []
    for cq in c:
        B = pert.matrix(t + cq * h)
        if lam is None:
            Gs.append(op.injection @ B)
        else:
            Gs.append(lam * np.column_stack(
                [resolvent_apply(op, lam, B[:, j]) for j in range(B.shape[1])]))
    return np.array(Gs)


def substep(op: OperatorModel, pert: PerturbationFamily, t: float, h: float,
            order: int = 4, picard_tol: float = 1e-13):
    """(P, W, stage times) for the cell [t, t + h]."""
    K = step_kernel(op, h, order)
    P, W, _ = step_maps(K, _stage_lifted(op, pert, t, h, K.c), picard_tol)
    return P, W, t + K.c * h


# ---------------------------------------------------------------------------
# table


@dataclass(eq=False)
class PropagatorTable:
    """U_B(t_i, t_j) for all grid pairs t_i >= t_j.

    ``steps[i]`` is the one-step block U_B(t_{i+1}, t_i) and ``weights[i, q]``
    the weight of the stage forcing at ``stage_times[i, q]`` in the cell
    increment.  Dense mode also keeps every block; compressed mode rebuilds
    them by products on demand.
    """

    op: OperatorModel
    pert: PerturbationFamily
    grid: TimeGrid
    steps: np.ndarray
    weights: np.ndarray
    stage_times: np.ndarray
    order: int
    picard_tol: float
    dense: Optional[np.ndarray] = None
    m_hat: float = math.nan
    omega_hat: float = math.nan
    max_contraction: float = 0.0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.steps.setflags(write=False)
        self.weights.setflags(write=False)
        if self.dense is not None:
            self.dense.setflags(write=False)

    @property
    def n(self) -> int:
        return self.grid.n_steps

    @property
    def N(self) -> int:
        return self.op.state_dim

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def mode(self) -> str:
        return "dense" if self.dense is not None else "compressed"

    def block(self, i: int, j: int) -> np.ndarray:
        if not 0 <= j <= i <= self.n:
            raise OutOfSpan(f"need 0 <= j <= i <= {self.n}, got i={i}, j={j}")
        if self.dense is not None:
            return self.dense[i, j]
        U = np.eye(self.N)
        for k in range(j, i):
            U = self.steps[k] @ U
        return U

    def iter_lags(self, max_lag: Optional[int] = None) -> Iterator:
        """Yield (lag, blocks) with blocks[j] = U(t_{j+lag}, t_j)."""
        max_lag = self.n if max_lag is None else min(max_lag, self.n)
        cur = np.broadcast_to(np.eye(self.N), (self.n + 1, self.N, self.N)).copy()
        yield 0, cur
        for lag in range(1, max_lag + 1):
            if self.dense is not None:
                idx = np.arange(self.n + 1 - lag)
                cur = self.dense[idx + lag, idx]
            else:
                cur = np.matmul(self.steps[lag - 1:], cur[:-1])
            yield lag, cur

    def lag_norms(self, max_lag: Optional[int] = None) -> list:
        """norms[lag][j] = ||U(t_{j+lag}, t_j)|| (spectral)."""
        return [np.linalg.norm(b, ord=2, axis=(1, 2)) for _, b in self.iter_lags(max_lag)]

    def increment_weights(self, i: int) -> np.ndarray:
        return self.weights[i]

    def to_csv(self, path):
        N = self.N
        header = ["i", "j", "t_i", "t_j"] + [f"u{r}{c}" for r in range(N) for c in range(N)]
        t = self.nodes

        def rows():
            for lag, blocks in self.iter_lags():
                for j in range(self.n + 1 - lag):
                    yield [j + lag, j, t[j + lag], t[j], *blocks[j].ravel()]

        ordered = sorted(rows(), key=lambda r: (r[1], r[0]))
        return write_csv(path, header, ordered)


def build_family(op: OperatorModel, pert: PerturbationFamily, grid: TimeGrid,
                 schedule: Optional[LambdaSchedule] = None,
                 picard_tol: float = 1e-13, order: int = 4, mode: str = "auto",
                 limit: str = "exact") -> PropagatorTable:
    """Sample the evolution family on ``grid``.

    ``limit="exact"`` uses the strong limit of lam R_lam(A) directly;
    ``limit="schedule"`` solves each cell at every lam of ``schedule`` and
    extrapolates the one-step maps.
    """
    op.require_dynamics()
    if pert.x_dim != op.x_dim or pert.state_dim != op.state_dim:
        raise DimensionMismatch("perturbation does not match the operator")
    if not picard_tol > 0:
        raise ValueError("picard_tol must be positive")
    h, n, N = grid.step, grid.n_steps, op.state_dim
    K = step_kernel(op, h, order)
    t = grid.nodes

    def sweep(lam):
        steps = np.empty((n, N, N))
        weights = np.empty((n, len(K.c), N, N))
        worst = 0.0
        cache = None
        for i in range(n):
            if pert.constant and cache is not None:
                steps[i], weights[i] = cache
                continue
            G = _stage_lifted(op, pert, t[i], h, K.c, lam)
            if G is not None:
                worst = max(worst, contraction_factor(K, G))
            P, W, _ = step_maps(K, G, picard_tol)
            steps[i], weights[i] = P, W
            if pert.constant:
                cache = (P, W)
        return steps, weights, worst

    info = {"limit": limit}
    if limit == "exact":
        steps, weights, worst = sweep(None)
    elif limit == "schedule":
        if schedule is None:
            raise ValueError("schedule mode needs a LambdaSchedule")
        schedule.validate(op.omega)
        worst_all = []

        def evaluate(lam):
            s, w, wc = sweep(lam)
            worst_all.append(wc)
            return np.concatenate([s.ravel(), w.ravel()])

        res = lambda_limit(evaluate, schedule)
        flat = res.value
        steps = flat[:n * N * N].reshape(n, N, N)
        weights = flat[n * N * N:].reshape(n, len(K.c), N, N)
        worst = max(worst_all)
        info.update(lambdas=res.lambdas.tolist(), increments=res.increments.tolist(),
                    accepted=res.accepted)
    else:
        raise ValueError(f"unknown limit mode {limit!r}")

    stage_times = t[:-1, None] + h * K.c[None, :]
    if mode == "auto":
        mode = "dense" if (n + 1) ** 2 * N * N <= DENSE_BUDGET else "compressed"
    table = PropagatorTable(op, pert, grid, steps, weights, stage_times, order,
                            picard_tol, max_contraction=worst, info=info)
    if mode == "dense":
        dense = np.zeros((n + 1, n + 1, N, N))
        for lag, blocks in table.iter_lags():
            idx = np.arange(n + 1 - lag)
            dense[idx + lag, idx] = blocks
        table.dense = dense
        dense.setflags(write=False)
    elif mode != "compressed":
        raise ValueError(f"unknown storage mode {mode!r}")
    table.m_hat, table.omega_hat = exp_bound_estimate(table)
    return table


def exp_bound_estimate(table: PropagatorTable, max_lag: Optional[int] = None):
    """(M_hat, omega_hat) with ||U(t_i, t_j)|| <= M_hat exp(omega_hat (t_i - t_j))."""
    norms = table.lag_norms(max_lag)
    if len(norms) < 2:
        return 1.0, 0.0
    h = table.grid.step
    lags = np.arange(1, len(norms))
    peak = np.array([np.max(x) for x in norms[1:]])
    tiny = np.finfo(float).tiny
    logp = np.log(np.maximum(peak, tiny))
    if len(lags) >= 2:
        omega, _ = np.polyfit(lags * h, logp, 1)
    else:
        omega = logp[0] / h
    envelope = np.max(np.concatenate([[0.0], logp - omega * lags * h]))
    return float(math.exp(envelope)), float(omega)


def _locate(grid: TimeGrid, t: float):
    if not grid.contains(t):
        raise OutOfSpan(f"t = {t} outside [{grid.t_start}, {grid.t_end}]")
    idx = grid.index(t, tol=1e-10)
    return idx


def propagate(table: PropagatorTable, t: float, s: float, x0) -> np.ndarray:
    """U_B(t, s) x0; off-node ends are reached by one collocation substep."""
    x0 = table.op.check_x0(x0).astype(float)
    if t < s:
        raise ValueError(f"propagate needs s <= t, got s={s}, t={t}")
    grid = table.grid
    it, is_ = _locate(grid, t), _locate(grid, s)
    if t == s:
        return x0.copy()
    op, pert = table.op, table.pert
    nodes = grid.nodes
    if is_ is None:
        up = grid.cell(s) + 1
        if nodes[up] >= t:
            P, _, _ = substep(op, pert, s, t - s, table.order, table.picard_tol)
            return P @ x0
        P, _, _ = substep(op, pert, s, nodes[up] - s, table.order, table.picard_tol)
        x0 = P @ x0
        is_ = up
    if it is None:
        down = grid.cell(t)
        x = x0
        for k in range(is_, down):
            x = table.steps[k] @ x
        P, _, _ = substep(op, pert, nodes[down], t - nodes[down], table.order,
                          table.picard_tol)
        return P @ x
    x = x0
    for k in range(is_, it):
        x = table.steps[k] @ x
    return x


def cocycle_residual(table: PropagatorTable, n_triples: int = 2000,
                     off_node: int = 50, seed: int = 0) -> float:
    """Worst relative residual of U(t,r)U(r,s) - U(t,s).

    Node triples test the stored blocks; ``off_node`` extra triples put r
    strictly inside a cell, which exercises the substep solver against the
    grid steps.
    """
    rng = np.random.default_rng(seed)
    n = table.n
    worst = 0.0
    for _ in range(n_triples):
        k, j, i = np.sort(rng.integers(0, n + 1, size=3))
        lhs = table.block(i, k)
        rhs = table.block(i, j) @ table.block(j, k)
        worst = max(worst, np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(lhs))))
    t = table.nodes
    eye = np.eye(table.N)
    for _ in range(off_node):
        k, i = np.sort(rng.integers(0, n + 1, size=2))
        if i == k:
            continue
        r = t[k] + (t[i] - t[k]) * rng.uniform(0.05, 0.95)
        if table.grid.index(r, tol=1e-6) is not None:
            continue
        lhs = table.block(i, k)
        mid = np.column_stack([propagate(table, r, t[k], e) for e in eye])
        rhs = np.column_stack([propagate(table, t[i], r, m) for m in mid.T])
        worst = max(worst, np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(lhs))))
    return float(worst)


def sample_forcing(table: PropagatorTable, f) -> np.ndarray:
    """Raw X-valued forcing at every stage time, shape (n, Q, m_b + N)."""
    op = table.op
    flat = [op.check_x(f(s)) for s in table.stage_times.ravel()]
    return np.array(flat).reshape(table.stage_times.shape + (op.x_dim,))


def map_forcing(op: OperatorModel, F: np.ndarray, lam: Optional[float] = None) -> np.ndarray:
    """Apply lam R_lam(A) (or its strong limit when lam is None) to samples F[..., :]."""
    flat = F.reshape(-1, op.x_dim).T
    if lam is None:
        out = op.lifted(flat)
    else:
        out = lam * resolvent_apply(op, lam, flat)
    return out.T.reshape(F.shape[:-1] + (op.state_dim,))


def stage_forcing(table: PropagatorTable, f, lam: Optional[float] = None) -> np.ndarray:
    """Lifted (or lam R_lam) forcing at every stage time, shape (n, Q, N)."""
    return map_forcing(table.op, sample_forcing(table, f), lam)


def increments(table: PropagatorTable, g: np.ndarray) -> np.ndarray:
    """Cell increments w_i = sum_q W_iq g_iq = int_{t_i}^{t_{i+1}} U(t_{i+1}, s) g(s) ds."""
    return np.einsum("iqab,iqb->ia", table.weights, g)
