"""Operator abstraction and the semigroup / integrated-semigroup primitives.

The abstract non-densely defined operator ``A`` on ``X = R^{m_b} x R^N`` is
represented in finite dimensions by its part ``A0`` on ``X0 = {0} x R^N``
together with a boundary lifting ``L``: ``R_lam(A) (y_b, y) =
(lam - A0)^{-1} (y + L y_b)``.  A descriptor system with ``m_b`` algebraic
(ghost) unknowns reduces to this form by a Schur complement.

X-vectors are flat arrays ``[boundary block, interior block]``; X0-vectors
are the interior block alone.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionMismatch,
    FitDegenerate,
    NegativeTime,
    QuadratureFailure,
    ScheduleExhausted,
    SingularResolvent,
)

SPECTRAL_MARGIN = 1e-6


# ---------------------------------------------------------------------------
# grids, schedules, quadrature


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    step: float

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        if not self.t_end > self.t_start:
            raise ValueError("grid needs t_end > t_start")
        ratio = (self.t_end - self.t_start) / self.step
        if abs(ratio - round(ratio)) > 1e-12 * max(1.0, abs(ratio)) * 1e3:
            raise ValueError(
                f"(t_end - t_start)/step = {ratio!r} is not an integer")

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t_start) / self.step))

    @property
    def nodes(self) -> np.ndarray:
        return self.t_start + self.step * np.arange(self.n_steps + 1)

    def __len__(self):
        return self.n_steps + 1

    def index(self, t: float, tol: float = 1e-9) -> Optional[int]:
        """Node index of ``t`` if it sits on the grid, else None."""
        k = (t - self.t_start) / self.step
        i = int(round(k))
        if abs(k - i) <= tol and 0 <= i <= self.n_steps:
            return i
        return None

    def cell(self, t: float) -> int:
        """Index of the node at or just below ``t`` (clipped to the last cell)."""
        k = (t - self.t_start) / self.step
        i = int(math.floor(k + 1e-9))
        return min(max(i, 0), self.n_steps - 1)

    def contains(self, t: float) -> bool:
        eps = 1e-9 * self.step
        return self.t_start - eps <= t <= self.t_end + eps

    def subgrid(self, t_start: float, t_end: float) -> "TimeGrid":
        i, j = self.index(t_start), self.index(t_end)
        if i is None or j is None:
            raise ValueError("subgrid endpoints must be grid nodes")
        return TimeGrid(float(self.nodes[i]), float(self.nodes[j]), self.step)


@dataclass(frozen=True)
class LambdaSchedule:
    """Geometric sequence lam_j = lambda_0 * growth**j realising lam -> +inf."""

    lambda_0: float
    growth: float = 2.0
    max_terms: int = 8
    rel_tol: float = 1e-8
    richardson: bool = True
    min_terms: int = 3

    def __post_init__(self):
        if not self.growth > 1:
            raise ValueError("growth must exceed 1")
        if self.max_terms < 2:
            raise ValueError("max_terms must be at least 2")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")

    @property
    def lambdas(self) -> np.ndarray:
        return self.lambda_0 * self.growth ** np.arange(self.max_terms)

    def validate(self, omega: float) -> None:
        if not self.lambda_0 > omega + 1:
            raise ValueError(
                f"lambda_0 = {self.lambda_0} must exceed omega + 1 = {omega + 1}")


@lru_cache(maxsize=None)
def gauss_legendre(order: int):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def composite_rule(a: float, b: float, n_panels: int, order: int = 4,
                   breakpoints: Sequence[float] = ()):
    """Composite Gauss-Legendre nodes/weights on [a, b].

    Panels are uniform between consecutive breakpoints, so discontinuities of
    the integrand placed at breakpoints are integrated without loss of order.
    """
    cuts = sorted({a, b, *[p for p in breakpoints if a < p < b]})
    c, w = gauss_legendre(order)
    total = b - a
    nodes, weights = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        m = max(1, int(math.ceil(n_panels * (hi - lo) / total - 1e-9)))
        edges = np.linspace(lo, hi, m + 1)
        h = np.diff(edges)
        nodes.append((edges[:-1, None] + h[:, None] * c[None, :]).ravel())
        weights.append((h[:, None] * w[None, :]).ravel())
    return np.concatenate(nodes), np.concatenate(weights)


def phi_functions(Z: np.ndarray, p: int) -> list:
    """[phi_0(Z), ..., phi_p(Z)] from one exponential of an augmented matrix.

    phi_0 = exp, phi_{k+1}(z) = (phi_k(z) - 1/k!)/z.  Stable for stiff Z.
    """
    n = Z.shape[0]
    M = np.zeros(((p + 1) * n, (p + 1) * n))
    M[:n, :n] = Z
    eye = np.eye(n)
    for j in range(p):
        M[j * n:(j + 1) * n, (j + 1) * n:(j + 2) * n] = eye
    E = sla.expm(M)
    return [E[:n, j * n:(j + 1) * n] for j in range(p + 1)]


# ---------------------------------------------------------------------------
# operator model


@dataclass(frozen=True, eq=False)
class OperatorModel:
    """Non-densely defined operator given by its resolvent on X = R^{m_b} x X0.

    ``part`` (the matrix of A0) and ``lift`` are needed by every dynamic
    routine; a bare resolvent oracle is enough for the resolvent probes.
    ``x0_weight`` scales the Euclidean coordinate norm to the physical X0 norm
    (e.g. sqrt(h) for cell values approximating L^2).  The X norm is the sum
    of absolute boundary components plus the X0 norm.
    """

    boundary_dim: int
    state_dim: int
    resolvent: Callable[[float, np.ndarray], np.ndarray]
    omega: float
    hy_constant_M: float = 1.0
    a_action: Optional[Callable[[np.ndarray], np.ndarray]] = None
    part: Optional[np.ndarray] = None
    lift: Optional[np.ndarray] = None
    spectral_points: Optional[np.ndarray] = None
    descriptor: Optional[np.ndarray] = None
    x0_weight: float = 1.0
    name: str = "operator"

    def __post_init__(self):
        if self.boundary_dim < 0 or self.state_dim < 1:
            raise DimensionMismatch("need boundary_dim >= 0 and state_dim >= 1")
        if not self.hy_constant_M >= 1:
            raise ValueError("hy_constant_M must be >= 1")

    @property
    def x_dim(self) -> int:
        return self.boundary_dim + self.state_dim

    def check_x(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.x_dim:
            raise DimensionMismatch(
                f"X-vector must have length {self.x_dim}, got {y.shape[0]}")
        return y

    def check_x0(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.state_dim:
            raise DimensionMismatch(
                f"X0-vector must have length {self.state_dim}, got {x.shape[0]}")
        return x

    def embed(self, x0) -> np.ndarray:
        """X0 -> X, (0, x0)."""
        x0 = self.check_x0(x0)
        pad = np.zeros((self.boundary_dim,) + x0.shape[1:])
        return np.concatenate([pad, x0], axis=0)

    def require_dynamics(self):
        if self.part is None:
            raise NotImplementedError(
                f"{self.name}: the part A0 is needed for semigroup evaluation")

    @property
    def injection(self) -> np.ndarray:
        """Matrix of lim lam R_lam(A) : X -> X0, i.e. [L | I]."""
        lift = self.lift if self.lift is not None else np.zeros(
            (self.state_dim, self.boundary_dim))
        return np.hstack([lift, np.eye(self.state_dim)])

    def lifted(self, y) -> np.ndarray:
        """Strong limit of lam R_lam(A) y as lam -> +inf (works on stacked columns)."""
        y = self.check_x(y)
        yb, yi = y[:self.boundary_dim], y[self.boundary_dim:]
        if self.boundary_dim and self.lift is not None:
            return yi + self.lift @ yb
        return yi.copy()

    def lam_resolvent(self, lam: float, y) -> np.ndarray:
        return lam * resolvent_apply(self, lam, y)

    # norms ---------------------------------------------------------------
    def norm0(self, v) -> float:
        return float(self.x0_weight * np.linalg.norm(v))

    def normx(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return float(np.abs(y[:self.boundary_dim]).sum()
                     + self.norm0(y[self.boundary_dim:]))

    def opnorm_x_to_x0(self, M: np.ndarray) -> float:
        """Norm of a map X -> X0 given as an N x (m_b+N) matrix."""
        mb = self.boundary_dim
        parts = [self.x0_weight * np.linalg.norm(M[:, b]) for b in range(mb)]
        if M.shape[1] > mb:
            parts.append(np.linalg.norm(M[:, mb:], 2))
        return float(max(parts))

    def opnorm_x0_to_x(self, M: np.ndarray) -> float:
        """Norm of a map X0 -> X given as an (m_b+N) x N matrix."""
        mb = self.boundary_dim
        rows = M[:mb] / self.x0_weight
        inner = M[mb:]
        if mb == 0:
            return float(np.linalg.norm(inner, 2))
        if not np.any(inner) and mb <= 12:
            best = 0.0
            for signs in np.ndindex(*(2,) * mb):
                s = 1.0 - 2.0 * np.array(signs)
                best = max(best, float(np.linalg.norm(s @ rows)))
            return best
        # mixed blocks: triangle-inequality upper bound
        return float(np.linalg.norm(rows, axis=1).sum() + np.linalg.norm(inner, 2))

    def known_spectrum(self) -> Optional[np.ndarray]:
        if self.spectral_points is not None:
            return np.asarray(self.spectral_points)
        if self.part is not None and self.state_dim <= 400:
            return np.linalg.eigvals(self.part)
        return None


def _lifted_resolvent(part, lift, mb):
    n = part.shape[0]
    eye = np.eye(n)

    def resolvent(lam, y):
        rhs = y[mb:] + (lift @ y[:mb] if mb else 0.0)
        return np.linalg.solve(lam * eye - part, rhs)

    return resolvent


def matrix_operator(A, omega: Optional[float] = None, M: float = 1.0,
                    name: str = "matrix") -> OperatorModel:
    """Densely defined limit case: X0 = X = R^N and A0 = A."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch("matrix backend needs a square matrix")
    if omega is None:
        # log-norm gives the Hille-Yosida bound with M = 1
        omega = float(np.max(np.linalg.eigvalsh(0.5 * (A + A.T))))
    n = A.shape[0]
    return OperatorModel(
        boundary_dim=0, state_dim=n,
        resolvent=_lifted_resolvent(A, np.zeros((n, 0)), 0),
        omega=omega, hy_constant_M=M,
        a_action=lambda phi: A @ phi,
        part=A, lift=np.zeros((n, 0)), name=name)


def lifted_operator(part, lift, omega: Optional[float] = None, M: float = 1.0,
                    x0_weight: float = 1.0, spectral_points=None,
                    name: str = "lifted") -> OperatorModel:
    part = np.atleast_2d(np.asarray(part, dtype=float))
    lift = np.asarray(lift, dtype=float).reshape(part.shape[0], -1)
    if omega is None:
        omega = float(np.max(np.linalg.eigvalsh(0.5 * (part + part.T))))
    mb = lift.shape[1]
    return OperatorModel(
        boundary_dim=mb, state_dim=part.shape[0],
        resolvent=_lifted_resolvent(part, lift, mb),
        omega=omega, hy_constant_M=M,
        a_action=lambda phi: part @ phi,
        part=part, lift=lift, spectral_points=spectral_points,
        x0_weight=x0_weight, name=name)


def descriptor_operator(K, boundary_dim: int, omega: Optional[float] = None,
                        M: float = 1.0, x0_weight: float = 1.0,
                        name: str = "descriptor") -> OperatorModel:
    """Boundary-block model from a square descriptor matrix.

    Unknowns are ``z = (g, phi)`` with ``m_b`` ghost values ``g``; the first
    ``m_b`` rows of ``K`` are the boundary rows, so ``(lam I - A)(0, phi) = y``
    reads ``(lam E - K) z = y`` with ``E = diag(0, I)``.
    """
    K = np.asarray(K, dtype=float)
    mb = boundary_dim
    Kbb, Kbp = K[:mb, :mb], K[:mb, mb:]
    Kpb, Kpp = K[mb:, :mb], K[mb:, mb:]
    try:
        Kbb_inv = np.linalg.inv(Kbb) if mb else np.zeros((0, 0))
    except np.linalg.LinAlgError as exc:
        raise SingularResolvent("boundary block of the descriptor is singular") from exc
    part = Kpp - Kpb @ Kbb_inv @ Kbp
    lift = -Kpb @ Kbb_inv
    model = lifted_operator(part, lift, omega=omega, M=M, x0_weight=x0_weight,
                            name=name)
    return OperatorModel(**{**model.__dict__, "descriptor": K})


# ---------------------------------------------------------------------------
# lambda limits


@dataclass
class LimitResult:
    value: np.ndarray
    raw_last: np.ndarray
    lambdas: np.ndarray
    increments: np.ndarray
    ratios: np.ndarray
    accepted: bool
    monotone: bool
    history: list = field(default_factory=list)

    @property
    def last_increment(self) -> float:
        return float(self.increments[-1]) if len(self.increments) else 0.0


def lambda_limit(evaluate: Callable[[float], np.ndarray],
                 schedule: LambdaSchedule, warn: bool = True) -> LimitResult:
    """Drive ``evaluate(lam)`` along the schedule and extrapolate lam -> inf.

    Stops once the sup-norm increment is below ``rel_tol`` (relative) and the
    last increment ratio sits within 0.2 of 1/growth.  A final Richardson
    step assumes an O(1/lam) error.
    """
    g = schedule.growth
    lams, vals, incs, ratios = [], [], [], []
    accepted = False
    for lam in schedule.lambdas:
        v = np.asarray(evaluate(float(lam)), dtype=float)
        if vals:
            inc = float(np.max(np.abs(v - vals[-1]))) if v.size else 0.0
            incs.append(inc)
            if len(incs) >= 2:
                ratios.append(incs[-1] / incs[-2] if incs[-2] > 0 else 0.0)
        lams.append(lam)
        vals.append(v)
        if len(vals) >= schedule.min_terms:
            scale = max(1.0, float(np.max(np.abs(v))) if v.size else 1.0)
            small = incs[-1] <= schedule.rel_tol * scale
            tiny = incs[-1] <= 1e-14 * scale
            gate = tiny or (ratios and abs(ratios[-1] - 1.0 / g) <= 0.2)
            if small and gate:
                accepted = True
                break
    monotone = all(abs(r - 1.0 / g) <= 0.2 for r in ratios
                   if incs and r > 0) if ratios else True
    if not accepted and warn:
        warnings.warn(
            f"lambda schedule exhausted at lam={lams[-1]:.3g} "
            f"(last increment {incs[-1] if incs else float('nan'):.3g})",
            ScheduleExhausted, stacklevel=2)
    last = vals[-1]
    if schedule.richardson and len(vals) >= 2:
        value = (g * vals[-1] - vals[-2]) / (g - 1.0)
    else:
        value = last
    return LimitResult(value=value, raw_last=last, lambdas=np.array(lams),
                       increments=np.array(incs), ratios=np.array(ratios),
                       accepted=accepted, monotone=monotone, history=vals)


# ---------------------------------------------------------------------------
# operations


def resolvent_apply(op: OperatorModel, lam: float, y) -> np.ndarray:
    """phi with (lam I - A)(0, phi) = y."""
    if not lam > op.omega:
        raise ValueError(f"lambda = {lam} must exceed omega = {op.omega}")
    y = op.check_x(y)
    spec = op.known_spectrum()
    if spec is not None and spec.size:
        gap = np.min(np.abs(spec - lam))
        if gap <= SPECTRAL_MARGIN * (1.0 + abs(lam)):
            raise SingularResolvent(
                f"lambda = {lam} is within {gap:.2e} of the spectrum")
    return np.asarray(op.resolvent(lam, y), dtype=float)


@dataclass
class ApproxIdentityReport:
    lambdas: np.ndarray
    errors: np.ndarray
    ratios: np.ndarray
    first_order: bool
    converged: bool


def approx_identity(op: OperatorModel, schedule: LambdaSchedule, x0):
    """lam R_lam(A) x0 at the last schedule term, with the error history."""
    x0 = op.check_x0(x0)
    y = op.embed(x0)
    lams = schedule.lambdas
    errs, value = [], x0
    for lam in lams:
        value = lam * resolvent_apply(op, lam, y)
        errs.append(op.norm0(value - x0))
    errs = np.array(errs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(errs[:-1] > 0, errs[1:] / errs[:-1], 0.0)
    nz = errs[:-1] > 0
    first_order = bool(np.all(np.abs(ratios[nz][-3:] * schedule.growth - 1.0) <= 0.2)) \
        if nz.any() else True
    converged = errs[-1] <= schedule.rel_tol * max(1.0, op.norm0(x0))
    if not converged:
        warnings.warn(
            f"lam R_lam x0 still {errs[-1]:.3g} away from x0 at lam={lams[-1]:.3g}",
            ScheduleExhausted, stacklevel=2)
    return value, ApproxIdentityReport(lams, errs, ratios, first_order, converged)


def semigroup_matrix(op: OperatorModel, t: float) -> np.ndarray:
    if t < 0:
        raise NegativeTime(f"semigroup evaluated at t = {t} < 0")
    op.require_dynamics()
    return sla.expm(t * op.part)


def semigroup_apply(op: OperatorModel, t: float, x0) -> np.ndarray:
    """T_{A0}(t) x0."""
    x0 = op.check_x0(x0)
    if t == 0:
        return x0.copy()
    return semigroup_matrix(op, t) @ x0


def integrated_semigroup_apply(op: OperatorModel, t: float, x, mu: float,
                               tol: float = 1e-11, check_tol: float = 1e-8,
                               order: int = 4, max_panels: int = 4096,
                               check_mu: bool = True) -> np.ndarray:
    """S_A(t) x = mu int_0^t T(s) R_mu x ds + [I - T(t)] R_mu x.

    The integral is taken by composite Gauss-Legendre with panel doubling.
    With ``check_mu`` the result is recomputed at 10*mu and a discrepancy
    above ``check_tol`` raises QuadratureFailure.
    """
    if t < 0:
        raise NegativeTime(f"S_A evaluated at t = {t} < 0")
    x = op.check_x(x)
    if t == 0:
        return np.zeros(op.state_dim)

    def at(m):
        v = resolvent_apply(op, m, x)
        prev = None
        n = 1
        while True:
            s, w = composite_rule(0.0, t, n, order)
            vals = np.array([semigroup_apply(op, si, v) for si in s])
            integral = w @ vals
            if prev is not None and np.max(np.abs(integral - prev)) <= tol * (
                    1.0 + np.max(np.abs(integral))):
                break
            if n >= max_panels:
                raise QuadratureFailure(
                    f"integrated semigroup quadrature did not settle at {n} panels")
            prev, n = integral, 2 * n
        return m * integral + v - semigroup_apply(op, t, v)

    out = at(mu)
    if check_mu:
        other = at(10.0 * mu)
        gap = float(np.max(np.abs(out - other)))
        if gap > check_tol * (1.0 + float(np.max(np.abs(out)))):
            raise QuadratureFailure(
                f"S_A(t)x depends on mu: |S(mu) - S(10 mu)| = {gap:.3e}")
    return out


def _default_panels(length: float) -> int:
    return max(4, int(math.ceil(length / 0.05)))


def diamond_convolution(op: OperatorModel, f: Callable[[float], np.ndarray],
                        t0: float, t: float, schedule: LambdaSchedule,
                        n_panels: Optional[int] = None, order: int = 4,
                        breakpoints: Sequence[float] = (),
                        full_output: bool = False):
    """(S_A <> f(t0 + .))(t - t0) = lim_lam int_{t0}^t T(t-s) lam R_lam f(s) ds."""
    if t < t0:
        raise NegativeTime("diamond convolution needs t >= t0")
    if t == t0:
        zero = np.zeros(op.state_dim)
        res = LimitResult(zero, zero, np.array([]), np.array([]), np.array([]),
                          True, True)
        return (zero, res) if full_output else zero
    schedule.validate(op.omega)
    n_panels = n_panels or _default_panels(t - t0)
    s, w = composite_rule(t0, t, n_panels, order, breakpoints)
    F = np.stack([op.check_x(f(si)) for si in s], axis=1)
    T = np.stack([semigroup_matrix(op, t - si) for si in s])

    def evaluate(lam):
        G = lam * np.column_stack([resolvent_apply(op, lam, F[:, q])
                                   for q in range(F.shape[1])])
        return np.einsum("q,qij,jq->i", w, T, G)

    res = lambda_limit(evaluate, schedule)
    return (res.value, res) if full_output else res.value


def diamond_cocycle_residual(op: OperatorModel, f, t: float, h: float,
                             schedule: LambdaSchedule, **kw) -> float:
    """Residual of (S<>f)(t+h) = T(h)(S<>f)(t) + (S<>f(t+.))(h), base point 0."""
    whole = diamond_convolution(op, f, 0.0, t + h, schedule, **kw)
    head = diamond_convolution(op, f, 0.0, t, schedule, **kw)
    tail = diamond_convolution(op, f, t, t + h, schedule, **kw)
    return float(np.max(np.abs(whole - semigroup_apply(op, h, head) - tail)))


def step_convolution_derivative(op: OperatorModel, x, a: float, c: float,
                                t: float, mu: float, **kw) -> np.ndarray:
    """d/dt (S_A * x 1_[a,c))(t) by the three-branch formula."""
    if not a < c:
        raise ValueError("need a < c")
    x = op.check_x(x)
    ap = max(0.0, a)
    if c <= 0 or t <= a:
        return np.zeros(op.state_dim)
    if t < c:
        return integrated_semigroup_apply(op, t - ap, x, mu, **kw)
    return semigroup_apply(op, t - c, integrated_semigroup_apply(op, c - ap, x, mu, **kw))


@dataclass
class GrowthFit:
    exponent: float
    constant: float
    lambdas: np.ndarray
    norms: np.ndarray


def fit_power_law(lambdas, norms) -> GrowthFit:
    lambdas = np.asarray(lambdas, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if lambdas.size < 3:
        raise FitDegenerate("power-law fit needs at least 3 lambda values")
    slope, _ = np.polyfit(np.log(lambdas), np.log(norms), 1)
    rho = -slope
    const = float(lambdas[-1] ** rho * norms[-1])
    return GrowthFit(float(rho), const, lambdas, norms)


def resolvent_growth_probe(op: OperatorModel, lambdas, channel="x0") -> GrowthFit:
    """Fit ||R_lam(A)|| restricted to an input channel as C * lam^(-rho).

    ``channel`` is ``"x0"`` (operator norm on X0) or an integer index into
    the boundary block.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size < 3:
        raise FitDegenerate("power-law fit needs at least 3 lambda values")
    if np.any(np.diff(lambdas) <= 0):
        raise ValueError("lambdas must be increasing")
    norms = []
    for lam in lambdas:
        if channel == "x0":
            op.require_dynamics()
            sv = np.linalg.svd(lam * np.eye(op.state_dim) - op.part, compute_uv=False)
            norms.append(1.0 / sv[-1])
        else:
            b = int(channel)
            if not 0 <= b < op.boundary_dim:
                raise DimensionMismatch(f"no boundary channel {b}")
            e = np.zeros(op.x_dim)
            e[b] = 1.0
            norms.append(op.norm0(resolvent_apply(op, lam, e)))
    return fit_power_law(lambdas, norms)


def delta_probe(op: OperatorModel, taus, order: int = 4, n_panels: int = 64) -> np.ndarray:
    """Measured delta(tau) = int_0^tau ||T(s) [L | I]||_{X -> X0} ds.

    An upper bound on the norm of f -> (S_A <> f)(tau) over sup-norm inputs,
    i.e. an admissible delta for the Hille-Yosida type growth estimate.  Panels are
    graded geometrically towards s = 0 where boundary lifts are singular.
    """
    op.require_dynamics()
    inj = op.injection
    out = []
    for tau in np.atleast_1d(taus):
        if tau <= 0:
            out.append(0.0)
            continue
        edges = np.concatenate([[0.0], tau * np.geomspace(1e-6, 1.0, n_panels)])
        c, w = gauss_legendre(order)
        total = 0.0
        for lo, hi in zip(edges[:-1], edges[1:]):
            for ci, wi in zip(c, w):
                s = lo + (hi - lo) * ci
                total += (hi - lo) * wi * op.opnorm_x_to_x0(semigroup_matrix(op, s) @ inj)
        out.append(total)
    return np.array(out)
