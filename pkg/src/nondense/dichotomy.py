"""Exponential dichotomies: construction, verification and use.

A split is stored through the factorisation Pi^-(t) = W(t) Z(t) with
Z(t) W(t) = I, W spanning the unstable fibre and ker Z(t) the stable one.
The backward propagator on the unstable fibre is then

    U^-(t, s) = W(t) [Z(s) U(s, t) W(t)]^{-1} Z(s),   t <= s,

which never inverts the full (possibly stiff) forward map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import make_interp_spline

from .errors import (
    EtaTooLarge,
    NotContracting,
    OutOfSpan,
    SpectralGapMissing,
    TailBudgetExceeded,
)
from .evolution_family import (
    PerturbationFamily,
    PropagatorTable,
    build_family,
    increments,
    map_forcing,
    propagate,
    sample_forcing,
)
from .operator_core import (
    LambdaSchedule,
    OperatorModel,
    TimeGrid,
    delta_probe,
    lambda_limit,
)
from .report import to_json
from .voc_solver import SolutionTrace


# ---------------------------------------------------------------------------
# split container


def _factor(Pm: np.ndarray, cut: float = 0.5):
    """W, Z with W Z = Pm, Z W = I (rank from singular values above ``cut``)."""
    U, s, Vt = np.linalg.svd(Pm)
    k = int(np.sum(s > cut))
    return U[:, :k], s[:k, None] * Vt[:k]


@dataclass(eq=False)
class DichotomySplit:
    """Projector family on a grid (``grid=None``: one time-independent projector)."""

    grid: Optional[TimeGrid]
    proj_minus: np.ndarray          # (n_nodes, N, N)
    kappa: float
    beta: float
    W: list = field(default_factory=list)
    Z: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.proj_minus = np.asarray(self.proj_minus, dtype=float)
        if self.proj_minus.ndim == 2:
            self.proj_minus = self.proj_minus[None]
        if not self.W:
            pairs = [_factor(P) for P in self.proj_minus]
            self.W = [p[0] for p in pairs]
            self.Z = [p[1] for p in pairs]

    @property
    def N(self) -> int:
        return self.proj_minus.shape[1]

    @property
    def rank_unstable(self) -> int:
        return self.W[0].shape[1]

    @property
    def proj_plus(self) -> np.ndarray:
        return np.eye(self.N)[None] - self.proj_minus

    @property
    def constant(self) -> bool:
        return self.grid is None

    def _idx(self, i: int) -> int:
        return 0 if self.constant else i

    def minus(self, i: int) -> np.ndarray:
        return self.proj_minus[self._idx(i)]

    def plus(self, i: int) -> np.ndarray:
        return np.eye(self.N) - self.minus(i)

    def arrays_on(self, table: PropagatorTable):
        """(Pi^+, W, Z) per table node, each stacked over nodes."""
        n1 = table.n + 1
        if self.constant:
            idx = np.zeros(n1, dtype=int)
        else:
            if self.grid != table.grid:
                raise ValueError("split and table grids differ")
            idx = np.arange(n1)
        Pp = np.eye(self.N)[None] - self.proj_minus[idx]
        W = np.array([self.W[k] for k in idx])
        Z = np.array([self.Z[k] for k in idx])
        return Pp, W, Z

    def factor_at(self, table: PropagatorTable, t: float):
        """W(t), Z(t) at any time in the table span (off-node by propagation)."""
        if self.constant:
            return self.W[0], self.Z[0]
        grid = table.grid
        i = grid.index(t, tol=1e-10)
        if i is not None:
            return self.W[i], self.Z[i]
        if not grid.contains(t):
            raise OutOfSpan(f"t = {t} outside the split grid")
        i = grid.cell(t)
        nodes = grid.nodes
        Wt = np.column_stack([propagate(table, t, nodes[i], w) for w in self.W[i].T]) \
            if self.rank_unstable else np.zeros((self.N, 0))
        V = np.column_stack([propagate(table, nodes[i + 1], t, e) for e in np.eye(self.N)])
        ZV = self.Z[i + 1] @ V
        Zt = np.linalg.solve(ZV @ Wt, ZV) if self.rank_unstable else np.zeros((0, self.N))
        return Wt, Zt

    def projector_at(self, table: PropagatorTable, t: float) -> np.ndarray:
        Wt, Zt = self.factor_at(table, t)
        return Wt @ Zt

    def swapped(self) -> "DichotomySplit":
        """Control split with the roles of the two fibres exchanged."""
        return DichotomySplit(self.grid, np.eye(self.N)[None] - self.proj_minus,
                              self.kappa, self.beta, info={"control": "swapped"})

    def corrupted(self, level: float, seed: int = 0) -> "DichotomySplit":
        """Control split with relative noise of size ``level`` on every projector."""
        rng = np.random.default_rng(seed)
        noisy = []
        for P in self.proj_minus:
            E = rng.standard_normal(P.shape)
            E *= level * max(1.0, np.linalg.norm(P, 2)) / np.linalg.norm(E, 2)
            noisy.append(P + E)
        return DichotomySplit(self.grid, np.array(noisy), self.kappa, self.beta,
                              info={"control": f"noise {level}"})

    def restrict(self, grid: TimeGrid) -> "DichotomySplit":
        if self.constant:
            return self
        i0 = self.grid.index(grid.t_start)
        i1 = self.grid.index(grid.t_end)
        if i0 is None or i1 is None or grid.step != self.grid.step:
            raise ValueError("restriction grid must be a node-aligned subgrid")
        sl = slice(i0, i1 + 1)
        return DichotomySplit(grid, self.proj_minus[sl], self.kappa, self.beta,
                              W=self.W[sl], Z=self.Z[sl], info=dict(self.info))


def restrict_table(table: PropagatorTable, grid: TimeGrid) -> PropagatorTable:
    i0 = table.grid.index(grid.t_start)
    i1 = table.grid.index(grid.t_end)
    if i0 is None or i1 is None or abs(grid.step - table.grid.step) > 1e-14:
        raise ValueError("restriction grid must be a node-aligned subgrid")
    sub = PropagatorTable(table.op, table.pert, grid, table.steps[i0:i1].copy(),
                          table.weights[i0:i1].copy(), table.stage_times[i0:i1].copy(),
                          table.order, table.picard_tol,
                          max_contraction=table.max_contraction, info=dict(table.info))
    sub.m_hat, sub.omega_hat = table.m_hat, table.omega_hat
    return sub


# ---------------------------------------------------------------------------
# constructors


def _sorted_projector(T: np.ndarray, Q: np.ndarray, k: int) -> np.ndarray:
    """Spectral projector onto the leading k-block of a sorted real Schur form."""
    N = T.shape[0]
    if k == 0:
        return np.zeros((N, N))
    if k == N:
        return np.eye(N)
    T11, T12, T22 = T[:k, :k], T[:k, k:], T[k:, k:]
    X = sla.solve_sylvester(T11, -T22, -T12)
    P = np.zeros((N, N))
    P[:k, :k] = np.eye(k)
    P[:k, k:] = -X
    return Q @ P @ Q.T


def _autonomous_generator(op: OperatorModel, pert_const) -> np.ndarray:
    op.require_dynamics()
    M = op.part.copy()
    if pert_const is not None:
        Bm = pert_const.matrix(0.0) if isinstance(pert_const, PerturbationFamily) \
            else np.asarray(pert_const, dtype=float)
        if isinstance(pert_const, PerturbationFamily) and not pert_const.constant:
            raise ValueError("spectral split needs a time-independent perturbation")
        if Bm.shape == (op.state_dim, op.state_dim) and op.boundary_dim:
            Bm = np.vstack([np.zeros((op.boundary_dim, op.state_dim)), Bm])
        M = M + op.injection @ Bm
    return M


def spectral_split_autonomous(op: OperatorModel, pert_const=None, threshold: float = 0.0,
                              margin: float = 1e-8, horizon: Optional[float] = None,
                              n_samples: int = 400) -> DichotomySplit:
    """Split the spectrum of (A + B)_0 about Re z = threshold."""
    M = _autonomous_generator(op, pert_const)
    N = M.shape[0]
    eig = np.linalg.eigvals(M)
    gap = float(np.min(np.abs(eig.real - threshold)))
    if gap <= margin * (1.0 + float(np.max(np.abs(eig)))):
        raise SpectralGapMissing(
            f"eigenvalue with real part within {gap:.2e} of {threshold}")
    T, Q, k = sla.schur(M, output="real", sort=lambda re, im: re < threshold)
    Pp = _sorted_projector(T, Q, k)
    Pm = np.eye(N) - Pp
    beta = gap
    # transient growth on each fibre, evaluated in the block-diagonal basis
    kappa = max(1.0, np.linalg.norm(Pp, 2), np.linalg.norm(Pm, 2))
    horizon = horizon if horizon is not None else min(50.0, 20.0 / beta)
    ts = np.linspace(0.0, horizon, n_samples)
    if 0 < k < N:
        X = sla.solve_sylvester(T[:k, :k], -T[k:, k:], -T[:k, k:])
        S = np.eye(N)
        S[:k, k:] = X
        Sinv = np.eye(N)
        Sinv[:k, k:] = -X
        left, right = Q @ S, Sinv @ Q.T
    else:
        left, right = Q, Q.T
    T11, T22 = T[:k, :k], T[k:, k:]
    shift = threshold
    for t in ts[1:]:
        if k:
            E = sla.expm(t * (T11 - shift * np.eye(k)))
            blk = left[:, :k] @ E @ right[:k]
            kappa = max(kappa, np.linalg.norm(blk, 2) * math.exp(beta * t))
        if k < N:
            E = sla.expm(-t * (T22 - shift * np.eye(N - k)))
            blk = left[:, k:] @ E @ right[k:]
            kappa = max(kappa, np.linalg.norm(blk, 2) * math.exp(beta * t))
    return DichotomySplit(None, Pm, float(kappa), beta,
                          info={"kind": "spectral", "eigenvalues": eig,
                                "stable_dim": int(k), "threshold": threshold})


def floquet_split(table: PropagatorTable, period: float,
                  margin: float = 1e-8) -> DichotomySplit:
    """Per-node spectral projectors of the monodromy U(t + P, t)."""
    h = table.grid.step
    p = int(round(period / h))
    if abs(p * h - period) > 1e-9 * period:
        raise ValueError("period must be a multiple of the grid step")
    if p > table.n:
        raise ValueError("table must span at least one period")
    N = table.N
    projs, mults = [], None
    for i in range(table.n + 1):
        if i + p <= table.n:
            Mon = table.block(i + p, i)
        else:
            Mon = table.block(i, i - p)
        mu = np.linalg.eigvals(Mon)
        if mults is None:
            mults = mu
        radius = np.abs(mu)
        if np.min(np.abs(np.log(np.maximum(radius, 1e-300)))) <= margin:
            raise SpectralGapMissing("Floquet multiplier on the unit circle")
        T, Q, k = sla.schur(Mon, output="real", sort=lambda re, im: re * re + im * im < 1.0)
        projs.append(np.eye(N) - _sorted_projector(T, Q, k))
    exps = np.log(np.maximum(np.abs(mults), 1e-300)) / period
    beta = float(np.min(np.abs(exps)))
    split = DichotomySplit(table.grid, np.array(projs), 1.0, beta,
                           info={"kind": "floquet", "multipliers": mults})
    split.kappa = fit_constants(table, split, beta=beta)[0]
    return split


def subspace_split(table: PropagatorTable, k_unstable: int,
                   seed: int = 0) -> DichotomySplit:
    """Dichotomy of a general table by forward / adjoint subspace iteration.

    The unstable fibre at t_i is the span of U(t_i, t_0) V for a generic V,
    the stable fibre the annihilator of the dominant k-dimensional subspace of
    U(t_n, t_i)^T.  Both are exact up to errors decaying like the dichotomy
    rate times the distance to the table ends, so only the table interior is
    trustworthy.
    """
    N, n = table.N, table.n
    k = int(k_unstable)
    rng = np.random.default_rng(seed)
    if k == 0:
        P = np.zeros((n + 1, N, N))
        split = DichotomySplit(table.grid, P, 1.0, 1.0, info={"kind": "subspace"})
    else:
        V = [None] * (n + 1)
        V[0] = np.linalg.qr(rng.standard_normal((N, k)))[0]
        for i in range(n):
            V[i + 1] = np.linalg.qr(table.steps[i] @ V[i])[0]
        Y = [None] * (n + 1)
        Y[n] = np.linalg.qr(rng.standard_normal((N, k)))[0]
        for i in range(n - 1, -1, -1):
            Y[i] = np.linalg.qr(table.steps[i].T @ Y[i + 1])[0]
        Ws, Zs, Ps = [], [], []
        for i in range(n + 1):
            Zi = np.linalg.solve(Y[i].T @ V[i], Y[i].T)
            Ws.append(V[i])
            Zs.append(Zi)
            Ps.append(V[i] @ Zi)
        split = DichotomySplit(table.grid, np.array(Ps), 1.0, 1.0, W=Ws, Z=Zs,
                               info={"kind": "subspace"})
    # constants from the middle half, where both iterations have settled
    g = table.grid
    q = n // 4
    mid = TimeGrid(g.nodes[q], g.nodes[n - q], g.step) if n - 2 * q >= 2 else g
    sub = restrict_table(table, mid)
    kappa, beta = fit_constants(sub, split.restrict(mid), max_lag=trusted_lags(sub))
    split.kappa, split.beta = kappa, beta
    return split


# ---------------------------------------------------------------------------
# verification


# Projectors are only exact to rounding; a leak of size eps into the growing
# fibre overtakes the decaying one after (omega + beta) L ~ log(1/eps).  Lags
# are cut where the leak is still ~1e-7 below the signal.
LEAK_BUDGET = math.log(1e7)


def trusted_lags(table: PropagatorTable, beta: Optional[float] = None) -> int:
    rate = abs(table.omega_hat) if math.isfinite(table.omega_hat) else 1.0
    if beta is not None and beta > 0:
        rate = max(rate, beta) + beta
    else:
        rate = 2.0 * rate
    if rate <= 0:
        return table.n
    return max(2, min(table.n, int(math.ceil(LEAK_BUDGET / rate / table.grid.step))))


def _lag_scan(table: PropagatorTable, split: DichotomySplit, max_lag: Optional[int]):
    """Per-lag maxima of the fibre norms and of the structural residuals."""
    Pp, W, Z = split.arrays_on(table)
    N = table.N
    k = split.rank_unstable
    Pm = np.eye(N)[None] - Pp
    out = {"lag": [], "plus": [], "minus": [], "commutation": [], "inverse": []}
    for lag, U in table.iter_lags(max_lag):
        if lag == 0:
            continue
        m = U.shape[0]
        a, b = np.arange(m), np.arange(m) + lag
        Uplus = U @ Pp[a]
        plus = np.linalg.norm(Uplus, ord=2, axis=(1, 2))
        comm = Pp[b] @ U - Uplus
        scale = np.max(np.abs(U)) * max(1.0, np.max(np.abs(Pp)))
        out["commutation"].append(float(np.max(np.abs(comm)) / scale))
        if k:
            Mk = Z[b] @ U @ W[a]
            Minv = np.linalg.inv(Mk)
            Uminus = W[a] @ Minv @ Z[b]            # U^-(t_j, t_{j+lag})
            minus = np.linalg.norm(Uminus, ord=2, axis=(1, 2))
            inv_res = Uminus @ U @ Pm[a] - Pm[a]
            out["inverse"].append(float(np.max(np.abs(inv_res))
                                        / max(1.0, np.max(np.abs(Pm)))))
        else:
            minus = np.zeros(m)
            out["inverse"].append(0.0)
        out["lag"].append(lag)
        out["plus"].append(float(np.max(plus)))
        out["minus"].append(float(np.max(minus)))
    return {key: np.array(v) for key, v in out.items()}


def _fit_from_scan(scan, h: float, proj_norm: float, beta: Optional[float] = None):
    lags = scan["lag"] * h
    tiny = 1e-290
    slopes = []
    for fam in ("plus", "minus"):
        vals = scan[fam]
        ok = vals > tiny
        if np.count_nonzero(ok) >= 2:
            slope, _ = np.polyfit(lags[ok], np.log(vals[ok]), 1)
            slopes.append(-slope)
    if beta is None:
        beta = float(min(slopes)) if slopes else 1.0
    env = [proj_norm, 1.0]
    for fam in ("plus", "minus"):
        vals = scan[fam]
        ok = vals > tiny
        if ok.any():
            env.append(float(np.max(vals[ok] * np.exp(beta * lags[ok]))))
    return float(max(env)), float(beta)


def fit_constants(table: PropagatorTable, split: DichotomySplit,
                  beta: Optional[float] = None, max_lag: Optional[int] = None):
    """(kappa, beta) tight for this table: beta from the decay slope, kappa the envelope."""
    if max_lag is None:
        max_lag = trusted_lags(table, beta if beta is not None else split.beta)
    scan = _lag_scan(table, split, max_lag)
    Pp, _, _ = split.arrays_on(table)
    pn = max(float(np.max(np.linalg.norm(Pp, ord=2, axis=(1, 2)))),
             float(np.max(np.linalg.norm(np.eye(table.N)[None] - Pp, ord=2, axis=(1, 2)))))
    return _fit_from_scan(scan, table.grid.step, pn, beta)


FAMILIES = ("projector", "commutation", "inverse", "decay", "projector_bound")


@dataclass
class DichotomyReport:
    residuals: dict
    kappa: float
    beta: float
    kappa_fit: float
    beta_fit: float
    tol: float
    passed: bool
    failed: list

    def to_json(self) -> str:
        return to_json({"residuals": self.residuals, "kappa": self.kappa,
                        "beta": self.beta, "kappa_fit": self.kappa_fit,
                        "beta_fit": self.beta_fit, "tol": self.tol,
                        "pass": self.passed, "failed": self.failed})


def verify_dichotomy(table: PropagatorTable, split: DichotomySplit, tol: float = 1e-8,
                     max_lag: Optional[int] = None) -> DichotomyReport:
    """Check the five invariant families of a split against a table."""
    Pp, _, _ = split.arrays_on(table)
    N = table.N
    Pm = np.eye(N)[None] - Pp
    proj = max(
        float(np.max(np.abs(Pp @ Pp - Pp))),
        float(np.max(np.abs(Pp @ Pm))),
        float(np.max(np.abs(Pm @ Pp))),
    )
    if max_lag is None:
        max_lag = trusted_lags(table, split.beta)
    scan = _lag_scan(table, split, max_lag)
    lags = scan["lag"] * table.grid.step
    decay = 0.0
    if len(lags):
        growth = np.exp(split.beta * lags) / split.kappa
        decay = float(max(0.0, np.max(scan["plus"] * growth) - 1.0,
                          np.max(scan["minus"] * growth) - 1.0))
    pnorm = max(float(np.max(np.linalg.norm(Pp, ord=2, axis=(1, 2)))),
                float(np.max(np.linalg.norm(Pm, ord=2, axis=(1, 2)))))
    residuals = {
        "projector": proj,
        "commutation": float(np.max(scan["commutation"])) if len(lags) else 0.0,
        "inverse": float(np.max(scan["inverse"])) if len(lags) else 0.0,
        "decay": decay,
        "projector_bound": max(0.0, pnorm / split.kappa - 1.0),
    }
    kfit, bfit = _fit_from_scan(scan, table.grid.step, pnorm)
    if not split.beta > 0:
        residuals["decay"] = math.inf
    failed = [k for k in FAMILIES if not residuals[k] <= tol]
    if not bfit > 0 and "decay" not in failed:
        failed.append("decay")
    return DichotomyReport(residuals, split.kappa, split.beta, kfit, bfit, tol,
                           not failed, failed)


# ---------------------------------------------------------------------------
# Green function and bounded orbits


@dataclass(eq=False)
class GreenFunction:
    split: DichotomySplit


def green_apply(g: GreenFunction, table: PropagatorTable, t: float, s: float, x) -> np.ndarray:
    """Gamma(t, s) x: U(t,s) Pi^+(s) x for t >= s, -U^-(t,s) x for t < s."""
    x = table.op.check_x0(x)
    for tau in (t, s):
        if not table.grid.contains(tau):
            raise OutOfSpan(f"t = {tau} outside the table span")
    split = g.split
    if t >= s:
        Ws, Zs = split.factor_at(table, s)
        return propagate(table, t, s, x - Ws @ (Zs @ x))
    Wt, _ = split.factor_at(table, t)
    _, Zs = split.factor_at(table, s)
    if Wt.shape[1] == 0:
        return np.zeros_like(x)
    UW = np.column_stack([propagate(table, s, t, w) for w in Wt.T])
    return -Wt @ np.linalg.solve(Zs @ UW, Zs @ x)


def _orbit(table: PropagatorTable, Pp, W, Z, w: np.ndarray) -> np.ndarray:
    """J(t_i) = int Gamma(t_i, s) g(s) ds over the table span from cell increments w."""
    n, N = table.n, table.N
    Jp = np.zeros((n + 1, N))
    for i in range(n):
        Jp[i + 1] = Pp[i + 1] @ (table.steps[i] @ Jp[i] + w[i])
    Jm = np.zeros((n + 1, N))
    if W.shape[2]:
        for i in range(n - 1, -1, -1):
            M = Z[i + 1] @ table.steps[i] @ W[i]
            Jm[i] = W[i] @ np.linalg.solve(M, Z[i + 1] @ (Jm[i + 1] + w[i]))
    return Jp - Jm


def weighted_norm(times, values, eta: float, norm) -> float:
    return float(max(math.exp(-eta * abs(t)) * norm(v) for t, v in zip(times, values)))


def delta_star(table: PropagatorTable, max_lag: int,
               stop_above: Optional[float] = None) -> np.ndarray:
    """Upper estimate of delta*(m h) = sup_t0 int_0^{mh} ||U(t0+mh, t0+s) J|| ds, m <= max_lag.

    The integral over the last cell is bounded by the free-semigroup probe
    of the lifted injection J, inflated by a Gronwall factor for B; earlier
    cells are transported by the stored block norms.  The scan stops early
    once the estimate exceeds ``stop_above``.
    """
    op, h, n = table.op, table.grid.step, table.n
    M = op.hy_constant_M
    jn = op.opnorm_x_to_x0(op.injection)
    btilde = table.pert.sup_b * jn if math.isfinite(table.pert.sup_b) else 0.0
    d_cell = float(delta_probe(op, [h])[0]) * M * math.exp(h * M * btilde)
    max_lag = min(max_lag, n)
    norms = []
    out = [0.0]
    for lag, blocks in table.iter_lags(max_lag - 1):
        norms.append(np.linalg.norm(blocks, ord=2, axis=(1, 2)))
        m = lag + 1
        js = np.arange(0, n - m + 1)
        tot = np.zeros(len(js))
        for c in range(m):
            tot += norms[m - c - 1][js + c + 1]
        out.append(float(np.max(tot)) * d_cell)
        if stop_above is not None and out[-1] > stop_above:
            break
    return np.array(out)


def chat_constant(table: PropagatorTable, split: DichotomySplit, nu: float,
                  max_tau: Optional[float] = None, dstar: Optional[np.ndarray] = None):
    """Smallest kappa*2*max(1, e^{-nu tau})/(1 - e^{-(beta+nu) tau}) over admissible tau.

    tau is admissible when kappa * delta*(tau) <= 1.  Returns (C_hat, tau).
    """
    kappa, beta, h = split.kappa, split.beta, table.grid.step
    if not nu > -beta:
        raise ValueError("need nu > -beta")
    if dstar is None:
        if max_tau is None:
            max_tau = 30.0 / beta
        dstar = delta_star(table, int(math.ceil(max_tau / h)), stop_above=1.0 / kappa)
    best, best_tau = math.inf, math.nan
    for m in range(1, len(dstar)):
        if kappa * dstar[m] > 1.0:
            break
        tau = m * h
        c = kappa * 2.0 * max(1.0, math.exp(-nu * tau)) / (1.0 - math.exp(-(beta + nu) * tau))
        if c < best:
            best, best_tau = c, tau
    return best, best_tau


def optimal_chat(table: PropagatorTable, split: DichotomySplit, n_nu: int = 40,
                 max_tau: Optional[float] = None):
    """min over nu in (-beta, 0] and admissible tau of C_hat(1, nu): (C, nu, tau)."""
    beta, h = split.beta, table.grid.step
    max_tau = max_tau if max_tau is not None else 30.0 / beta
    dstar = delta_star(table, int(math.ceil(max_tau / h)), stop_above=1.0 / split.kappa)
    best = (math.inf, math.nan, math.nan)
    for nu in -beta * np.linspace(0.0, 1.0, n_nu, endpoint=False):
        c, tau = chat_constant(table, split, float(nu), dstar=dstar)
        if c < best[0]:
            best = (c, float(nu), tau)
    return best


def tail_length(kappa: float, beta: float, eta: float, f_norm: float, tol: float,
                lift_norm: float = 1.0) -> float:
    """Margin L making the truncated tails of the orbit integral smaller than tol."""
    rate = beta - eta
    arg = kappa * lift_norm * max(f_norm, 1e-300) / (rate * tol)
    return max(0.0, math.log(arg) / rate) if arg > 1 else 0.0


def bounded_solution(table: PropagatorTable, split: DichotomySplit, op: OperatorModel,
                     f: Callable, window: TimeGrid, schedule: Optional[LambdaSchedule] = None,
                     eta: float = 0.0, tol: float = 1e-8,
                     limit: str = "schedule") -> SolutionTrace:
    """Bounded complete orbit u = lim_lam int Gamma(t, s) lam R_lam(A) f(s) ds on ``window``.

    The table must extend beyond the window far enough that the truncated
    tails are below ``tol``; otherwise TailBudgetExceeded reports the margin
    needed.
    """
    if not 0 <= eta < split.beta:
        raise EtaTooLarge(f"eta = {eta} must lie in [0, beta = {split.beta})")
    g = table.grid
    i0, i1 = g.index(window.t_start), g.index(window.t_end)
    if i0 is None or i1 is None or abs(window.step - g.step) > 1e-14:
        raise OutOfSpan("window must be a node-aligned part of the table grid")
    F = sample_forcing(table, f)
    st = table.stage_times.ravel()
    fx = F.reshape(-1, op.x_dim)
    f_eta = max(math.exp(-eta * abs(s)) * op.normx(v) for s, v in zip(st, fx))
    f_eta = max(f_eta, max(math.exp(-eta * abs(s)) * op.normx(op.check_x(f(s)))
                           for s in g.nodes))
    lift_norm = op.opnorm_x_to_x0(op.injection)
    margin = min(window.t_start - g.t_start, g.t_end - window.t_end)
    rate = split.beta - eta
    budget = split.kappa * lift_norm * f_eta * math.exp(-rate * margin) / rate
    need = tail_length(split.kappa, split.beta, eta, f_eta, tol, lift_norm)
    if budget > tol:
        raise TailBudgetExceeded(
            f"tail bound {budget:.3e} > tol {tol:.1e}; the table needs a margin of "
            f"{math.ceil(need / g.step) * g.step:.4g} around the window "
            f"(has {margin:.4g})", budget=budget)
    Pp, W, Z = split.arrays_on(table)

    def evaluate(lam):
        return _orbit(table, Pp, W, Z, increments(table, map_forcing(op, F, lam)))[i0:i1 + 1]

    if limit == "exact":
        values = evaluate(None)
        lam_err = np.zeros((len(values), 0))
        lambdas, accepted = np.array([]), True
    else:
        if schedule is None:
            raise ValueError("schedule limit needs a LambdaSchedule")
        schedule.validate(op.omega)
        res = lambda_limit(evaluate, schedule)
        values = res.value
        hist = np.array(res.history)
        lam_err = np.max(np.abs(np.diff(hist, axis=0)), axis=2).T
        lambdas, accepted = res.lambdas, res.accepted
    t = window.nodes
    u_eta = weighted_norm(t, values, eta, op.norm0)
    nu = -(eta + split.beta) / 2.0
    chat, tau = chat_constant(table, split, nu)
    ratio = u_eta / f_eta if f_eta > 0 else 0.0
    info = {"tail_budget": budget, "tail_margin_needed": need, "f_eta": f_eta,
            "u_eta": u_eta, "weighted_ratio": ratio, "chat": chat, "chat_tau": tau,
            "nu": nu, "bound_ok": bool(ratio <= 2.0 * chat)}
    return SolutionTrace(window, values, lam_err, lambdas=lambdas, accepted=accepted,
                         info=info)


def invariance_check(split: DichotomySplit, table: PropagatorTable, op: OperatorModel,
                     f: Callable, schedule: LambdaSchedule, t: float, l: float) -> float:
    """Residual of J(f)(t) = U(t,l) J(f)(l) + int_l^t U(t,s) lam R_lam f ds at the last lam."""
    if l > t:
        raise ValueError("need l <= t")
    g = table.grid
    it, il = g.index(t), g.index(l)
    if it is None or il is None:
        raise OutOfSpan("t and l must be table nodes")
    if it == il:
        return 0.0
    lam = float(schedule.lambdas[-1])
    Pp, W, Z = split.arrays_on(table)
    w = increments(table, map_forcing(op, sample_forcing(table, f), lam))
    J = _orbit(table, Pp, W, Z, w)
    x = J[il]
    for i in range(il, it):
        x = table.steps[i] @ x + w[i]
    return float(op.norm0(J[it] - x) / max(1.0, op.norm0(J[it])))


# ---------------------------------------------------------------------------
# admissibility


def trial_battery(op: OperatorModel, n: int = 10, seed: int = 0) -> list:
    """Seeded bounded forcings: random trigonometric sums in X."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        K = 3
        amp = rng.standard_normal((K, op.x_dim))
        freq = rng.uniform(0.2, 2.0, K)
        phase = rng.uniform(0, 2 * np.pi, K)
        const = rng.standard_normal(op.x_dim)

        def f(t, amp=amp, freq=freq, phase=phase, const=const):
            return const + np.cos(freq * t + phase) @ amp

        out.append(f)
    return out


@dataclass
class AdmissibilityVerdict:
    verdict: str
    center_mass: float
    residuals: list
    consistency: list
    diagnosis: str

    @property
    def solvable(self) -> bool:
        return self.verdict == "UNIQUE-SOLVABLE"


def _global_operator(table: PropagatorTable, lo: int, hi: int):
    """Sparse L with (L u)_i = u_{i+1} - P_i u_i on nodes lo..hi."""
    N = table.N
    m = hi - lo
    rows, cols, vals = [], [], []
    for r in range(m):
        P = table.steps[lo + r]
        for a in range(N):
            for b in range(N):
                if P[a, b] != 0:
                    rows.append(r * N + a)
                    cols.append(r * N + b)
                    vals.append(-P[a, b])
            rows.append(r * N + a)
            cols.append((r + 1) * N + a)
            vals.append(1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m * N, (m + 1) * N))


def _min_norm(L, w):
    LLt = (L @ L.T).tocsc()
    y = spla.spsolve(LLt, w)
    return L.T @ y


def admissibility_probe(op: OperatorModel, pert: PerturbationFamily, window: TimeGrid,
                        schedule: Optional[LambdaSchedule], trial_forcings: Sequence,
                        table: Optional[PropagatorTable] = None,
                        mass_threshold: float = 0.1, residual_tol: float = 1e-8,
                        consistency_tol: float = 1e-3) -> AdmissibilityVerdict:
    """Probe whether every bounded forcing has a unique bounded orbit on the window.

    The orbit relation u_{i+1} = P_i u_i + w_i over the window is solved in
    the minimum-norm sense, which penalises growth at both window edges
    without prescribing values there.  A bounded homogeneous orbit shows up
    as a null vector with a large share of its mass in the middle half of
    the window.  Each trial is solved again on a slightly shrunken window;
    a genuine bounded orbit does not notice the change in the middle third.
    """
    if not math.isfinite(pert.sup_b):
        raise ValueError("admissibility needs a bounded perturbation")
    if table is None:
        table = build_family(op, pert, window, mode="compressed")
    n, N = table.n, table.N
    L = _global_operator(table, 0, n)
    null = sla.null_space(L.toarray())
    centre = slice((n // 4) * N, (n + 1 - n // 4) * N)
    if null.shape[1]:
        Qc = null[centre]
        cmax = float(np.max(np.linalg.eigvalsh(Qc.T @ Qc)))
    else:
        cmax = 0.0
    residuals, consistency = [], []
    q = max(1, n // 12)
    Ls = _global_operator(table, q, n - q)
    for f in trial_forcings:
        if schedule is not None:
            lam = float(schedule.lambdas[-1])
            g = map_forcing(op, sample_forcing(table, f), lam)
        else:
            g = map_forcing(op, sample_forcing(table, f))
        w = increments(table, g)
        u = _min_norm(L, w.ravel())
        res = float(np.linalg.norm(L @ u - w.ravel()) / max(1e-300, np.linalg.norm(w)))
        us = _min_norm(Ls, w[q:n - q].ravel()).reshape(-1, N)
        uf = u.reshape(-1, N)
        inner = slice(n // 3, n - n // 3 + 1)
        shifted = slice(n // 3 - q, n - n // 3 + 1 - q)
        scale = max(1e-300, np.max(np.abs(uf[inner])))
        residuals.append(res)
        consistency.append(float(np.max(np.abs(us[shifted] - uf[inner])) / scale))
    diag = []
    if cmax > mass_threshold:
        diag.append(f"bounded homogeneous orbit (centre mass {cmax:.3f})")
    if residuals and max(residuals) > residual_tol:
        diag.append(f"residual floor not reached ({max(residuals):.2e})")
    if consistency and max(consistency) > consistency_tol:
        diag.append(f"window-dependent orbit (interior gap {max(consistency):.2e})")
    verdict = "ILL-POSED" if diag else "UNIQUE-SOLVABLE"
    return AdmissibilityVerdict(verdict, cmax, residuals, consistency,
                                "; ".join(diag) if diag else "ok")


# ---------------------------------------------------------------------------
# persistence


@dataclass
class PersistenceResult:
    q: float
    epsilon: float
    chat: float
    nu: float
    tau: float
    passed: bool
    split: Optional[DichotomySplit] = None
    table: Optional[PropagatorTable] = None
    report: Optional[DichotomyReport] = None
    solutions: list = field(default_factory=list)
    uniqueness_gap: float = 0.0
    cross_check: float = 0.0
    iterations: list = field(default_factory=list)


def _node_to_stage(table: PropagatorTable, u: np.ndarray) -> np.ndarray:
    spl = make_interp_spline(table.nodes, u, k=5)
    return spl(table.stage_times)


def _fixed_point(table, split_arrays, D, f_stage, u0, tol, max_iter):
    op = table.op
    Pp, W, Z = split_arrays
    u = u0
    for it in range(1, max_iter + 1):
        us = _node_to_stage(table, u)
        Du = np.einsum("iqab,iqb->iqa", D, us)
        g = map_forcing(op, Du + f_stage)
        u_new = _orbit(table, Pp, W, Z, increments(table, g))
        diff = float(np.max(np.abs(u_new - u)))
        u = u_new
        if diff <= tol * max(1.0, float(np.max(np.abs(u)))):
            return u, it
    raise NotContracting(f"fixed point did not settle in {max_iter} sweeps", q=None)


def persistence_solve(op: OperatorModel, B: PerturbationFamily, C: PerturbationFamily,
                      split_B: DichotomySplit, table_B: PropagatorTable, window: TimeGrid,
                      forcings: Optional[Sequence] = None, picard_tol: float = 1e-11,
                      max_iter: int = 500, verify_tol: float = 1e-6,
                      cross_tol: float = 1e-5, seed: int = 0) -> PersistenceResult:
    """Certify that C inherits the dichotomy of B when q = 2 C_hat(1, nu) eps < 1.

    The bounded orbit of the C-problem is the fixed point of
    u -> J_B((C - B)u + f); it is computed for a set of forcings, the
    C-family and its split are built directly, and the split is checked both
    against the table (verify_dichotomy on the window) and against the
    fixed-point orbits.
    """
    stage = table_B.stage_times
    D_fam = C.minus(B, op, samples=stage.ravel())
    eps = D_fam.sup_b
    chat, nu, tau = optimal_chat(table_B, split_B)
    q = 2.0 * chat * eps
    if eps == 0.0:
        sub = restrict_table(table_B, window)
        same = split_B.restrict(window)
        report = verify_dichotomy(sub, same, tol=verify_tol)
        return PersistenceResult(0.0, 0.0, chat, nu, tau, report.passed, split=same,
                                 table=sub, report=report)
    if not q < 1.0:
        raise NotContracting(f"q = {q:.3f} >= 1: persistence not certified", q=q)
    g = table_B.grid
    i0, i1 = g.index(window.t_start), g.index(window.t_end)
    if i0 is None or i1 is None:
        raise OutOfSpan("window must be node-aligned in the table grid")
    D = np.array([[D_fam.matrix(s) for s in row] for row in stage])
    arrays = split_B.arrays_on(table_B)
    if forcings is None:
        forcings = trial_battery(op, n=3, seed=seed)
    rng = np.random.default_rng(seed)
    sols, its, gap = [], [], 0.0
    for f in forcings:
        F = sample_forcing(table_B, f)
        u, k1 = _fixed_point(table_B, arrays, D, F, np.zeros((g.n_steps + 1, op.state_dim)),
                             picard_tol, max_iter)
        u2, k2 = _fixed_point(table_B, arrays, D, F,
                              rng.standard_normal(u.shape), picard_tol, max_iter)
        gap = max(gap, float(np.max(np.abs(u - u2)[i0:i1 + 1])))
        sols.append(u)
        its.append((k1, k2))
    table_C = build_family(op, C, g, mode="compressed")
    split_full = subspace_split(table_C, split_B.rank_unstable, seed=seed)
    sub_table = restrict_table(table_C, window)
    split_win = split_full.restrict(window)
    kfit, bfit = fit_constants(sub_table, split_win)
    split_win.kappa, split_win.beta = kfit, bfit
    split_full.kappa, split_full.beta = kfit, bfit
    report = verify_dichotomy(sub_table, split_win, tol=verify_tol)
    Pc, Wc, Zc = split_full.arrays_on(table_C)
    cross = 0.0
    for f, u in zip(forcings, sols):
        w = increments(table_C, map_forcing(op, sample_forcing(table_C, f)))
        v = _orbit(table_C, Pc, Wc, Zc, w)
        scale = max(1.0, float(np.max(np.abs(u[i0:i1 + 1]))))
        cross = max(cross, float(np.max(np.abs(u - v)[i0:i1 + 1])) / scale)
    passed = report.passed and report.beta_fit > 0 and cross <= cross_tol and gap <= 10 * picard_tol * max(
        1.0, max(float(np.max(np.abs(s))) for s in sols))
    return PersistenceResult(q, eps, chat, nu, tau, passed, split=split_win, table=sub_table,
                             report=report, solutions=sols, uniqueness_gap=gap,
                             cross_check=cross, iterations=its)
