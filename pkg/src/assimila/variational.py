"""3D-Var, strong-constraint 4D-Var and incremental (Gauss-Newton) 4D-Var.

The window runs over time indices ``0..N``. Observations live in an
``ObservationBatch``; unobserved times simply contribute nothing. The
linearized stacked observation operator (observation of the tangent-linear
trajectory) is never materialized except on explicit request.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .covariance import Covariance, as_covariance
from .errors import (
    AssimilaError,
    DimensionMismatch,
    InvalidSpectrum,
    LineSearchFailure,
    NotPositiveDefinite,
    SingularInnovationCovariance,
)
from .linalg import EigenPairs, LinearOperator, conjugate_gradient, identity_operator
from .models import Model
from .observations import ObservationBatch, ObservationOperator


@dataclass
class VarProblem:
    """Everything a variational analysis over ``[0, N]`` needs."""

    model: Model
    obs_operator: ObservationOperator
    obs: ObservationBatch
    B: Covariance
    xb: np.ndarray
    N: int = 0

    def __post_init__(self):
        self.xb = np.asarray(self.xb, dtype=float)
        n = self.model.n
        if self.xb.shape != (n,):
            raise DimensionMismatch(f"background has shape {self.xb.shape}, model dimension is {n}")
        if self.obs_operator.n != n:
            raise DimensionMismatch("observation operator dimension does not match the model")
        self.B = as_covariance(self.B, n)
        if self.N < 0:
            raise ValueError("window length N must be non-negative")
        if self.obs is None:
            self.obs = ObservationBatch.empty()
        if any(t < 0 or t > self.N for t in self.obs.times):
            raise DimensionMismatch(f"observation times must lie in [0, {self.N}]")
        if len(self.obs) and self.obs.p != self.obs_operator.p:
            raise DimensionMismatch("observation vectors do not match the operator's output size")

    @property
    def n(self) -> int:
        return self.model.n

    def trajectory(self, x0) -> np.ndarray:
        return self.model.propagate(x0, self.N)

    def innovations(self, traj) -> list:
        """``(t, d_t, R_t)`` with ``d_t = y_t - H(x_t)`` for each observed time."""
        out = []
        for k, t in enumerate(self.obs.times):
            out.append((t, self.obs.values[k] - self.obs_operator(traj[t]), self.obs.covariance(k)))
        return out


@dataclass
class DescentConfig:
    method: str = "gauss_newton"
    outer_max: int = 20
    inner_max: Optional[int] = None
    grad_tol: float = 1e-6
    step_tol: float = 1e-10
    cg_tol: float = 1e-8
    initial_step: float = 1.0
    backtrack: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 30

    def __post_init__(self):
        if self.method not in ("gradient", "gauss_newton"):
            raise ValueError(f"unknown descent method {self.method!r}")
        if not (self.grad_tol > 0 and self.step_tol > 0 and self.cg_tol > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.outer_max < 0:
            raise ValueError("outer_max must be non-negative")


@dataclass
class PreconditionerSpec:
    """``level`` is one of ``none``, ``first`` or ``spectral_lmp``.

    ``spectral_lmp`` implies the first-level change of variables. Its
    eigenpairs come from ``pairs`` when given, otherwise from the Ritz pairs
    of the first inner CG solve (reused by later outer iterations).
    """

    level: str = "none"
    k: int = 0
    pairs: Optional[EigenPairs] = None

    def __post_init__(self):
        if self.level not in ("none", "first", "spectral_lmp"):
            raise ValueError(f"unknown preconditioner level {self.level!r}")
        if self.k < 0:
            raise ValueError("k must be non-negative")


@dataclass
class VarDiagnostics:
    costs: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    accepted_steps: int = 0
    converged: bool = False
    diverged: bool = False
    line_search_failed: bool = False
    stop_reason: str = ""

    @property
    def outer_iterations(self) -> int:
        return self.accepted_steps


# --------------------------------------------------------------------------
# cost functions and gradients


def _obs_term(problem: VarProblem, traj) -> float:
    return sum(0.5 * R.mahalanobis_sq(d) for _, d, R in problem.innovations(traj))


def cost_strong4dvar(x0, problem: VarProblem) -> float:
    """Strong-constraint cost evaluated along the nonlinear trajectory from ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    traj = problem.trajectory(x0)
    return _obs_term(problem, traj) + 0.5 * problem.B.mahalanobis_sq(x0 - problem.xb)


def cost_3dvar(x, problem: VarProblem) -> float:
    if problem.N != 0:
        raise ValueError("3D-Var needs a single-time problem (N = 0)")
    return cost_strong4dvar(x, problem)


def adjoint_sweep(problem: VarProblem, traj, forcing) -> np.ndarray:
    """Backward recursion ``lam_i = M_i^T lam_{i+1} + forcing_i``, ``lam_{N+1} = 0``.

    ``forcing`` maps time index to an n-vector; returns ``lam_0``.
    """
    lam = np.zeros(problem.n)
    started = False
    for i in range(problem.N, -1, -1):
        if started:
            lam = problem.model.adjoint(traj[i], lam, i)
        f = forcing.get(i)
        if f is not None:
            lam = lam + f
            started = True
    return lam


def grad_strong4dvar(x0, problem: VarProblem) -> np.ndarray:
    """Gradient by the adjoint recursion: ``-lam_0 + B^{-1}(x0 - xb)``."""
    x0 = np.asarray(x0, dtype=float)
    traj = problem.trajectory(x0)
    forcing = {}
    H = problem.obs_operator
    for t, d, R in problem.innovations(traj):
        # d = y - H(x), so -H^T R^{-1}(H(x) - y) = H^T R^{-1} d
        forcing[t] = H.adjoint(traj[t], R.apply_inverse(d))
    lam0 = adjoint_sweep(problem, traj, forcing)
    return -lam0 + problem.B.apply_inverse(x0 - problem.xb)


def grad_3dvar(x, problem: VarProblem) -> np.ndarray:
    if problem.N != 0:
        raise ValueError("3D-Var needs a single-time problem (N = 0)")
    return grad_strong4dvar(x, problem)


# --------------------------------------------------------------------------
# linearized operators


class StackedObservation:
    """Action of ``[H_0; H_1 M_0; ...]`` at a fixed trajectory, restricted to observed times."""

    def __init__(self, problem: VarProblem, traj):
        self.problem = problem
        self.traj = np.asarray(traj)
        self.times = list(problem.obs.times)
        self.p = problem.obs_operator.p
        self.m = self.p * len(self.times)

    def matvec(self, dx0):
        pr = self.problem
        out = np.empty(self.m)
        if not self.times:
            return out
        dx = np.asarray(dx0, dtype=float)
        H = pr.obs_operator
        last = self.times[-1]
        k = 0
        for i in range(last + 1):
            if k < len(self.times) and self.times[k] == i:
                out[k * self.p:(k + 1) * self.p] = H.tangent_linear(self.traj[i], dx)
                k += 1
            if i < last:
                dx = pr.model.tangent_linear(self.traj[i], dx, i)
        return out

    def rmatvec(self, w):
        pr = self.problem
        w = np.asarray(w, dtype=float)
        H = pr.obs_operator
        forcing = {t: H.adjoint(self.traj[t], w[k * self.p:(k + 1) * self.p])
                   for k, t in enumerate(self.times)}
        return adjoint_sweep(pr, self.traj, forcing)

    def operator(self) -> LinearOperator:
        return LinearOperator(self.m, self.problem.n, self.matvec, self.rmatvec)

    def R_apply(self, w, inverse=False):
        out = np.empty_like(np.asarray(w, dtype=float))
        for k in range(len(self.times)):
            C = self.problem.obs.covariance(k)
            blk = slice(k * self.p, (k + 1) * self.p)
            out[blk] = C.apply_inverse(w[blk]) if inverse else C.apply(w[blk])
        return out

    def R_dense(self) -> np.ndarray:
        R = np.zeros((self.m, self.m))
        for k in range(len(self.times)):
            blk = slice(k * self.p, (k + 1) * self.p)
            R[blk, blk] = self.problem.obs.covariance(k).to_dense()
        return R

    def stacked_innovation(self):
        pr = self.problem
        if not self.times:
            return np.zeros(0)
        return np.concatenate([d for _, d, _ in pr.innovations(self.traj)])


def hessian_operator(problem: VarProblem, x0) -> LinearOperator:
    """Gauss-Newton Hessian ``B^{-1} + H^T R^{-1} H`` linearized at ``x0``."""
    Hs = StackedObservation(problem, problem.trajectory(x0))
    B = problem.B

    def mv(v):
        return B.apply_inverse(v) + Hs.rmatvec(Hs.R_apply(Hs.matvec(v), inverse=True))

    return LinearOperator(problem.n, problem.n, mv, symmetric=True)


def first_level_transform(problem: VarProblem, x0=None) -> LinearOperator:
    """Hessian after ``dx = L dx~`` with ``B = L L^T``: ``I + L^T H^T R^{-1} H L``."""
    x0 = problem.xb if x0 is None else np.asarray(x0, dtype=float)
    Hs = StackedObservation(problem, problem.trajectory(x0))
    return _first_level_from(problem.B, Hs)


def _first_level_from(B: Covariance, Hs: StackedObservation) -> LinearOperator:
    n = B.dim
    if B.sqrt_dim != n:
        raise NotPositiveDefinite("first-level preconditioning needs a full-rank B factor")

    def mv(v):
        w = Hs.R_apply(Hs.matvec(B.sqrt_apply(v)), inverse=True)
        return v + B.sqrt_transpose_apply(Hs.rmatvec(w))

    return LinearOperator(n, n, mv, symmetric=True)


def _dedupe_pairs(pairs: EigenPairs, gap: float = 1e-10) -> EigenPairs:
    keep = []
    for i, lam in enumerate(pairs.values):
        if all(abs(lam - pairs.values[j]) >= gap for j in keep):
            keep.append(i)
    return EigenPairs(pairs.values[keep], pairs.vectors[:, keep])


def spectral_lmp(pairs: EigenPairs, power: float = -1.0) -> LinearOperator:
    """Limited-memory operator ``I + sum_i (lam_i^power - 1) w_i w_i^T``.

    ``power=-1`` (default) gives the preconditioner ``C^{-1}``; ``power=1``
    the Hessian approximation ``C`` itself and ``power=-0.5`` ``C^{-1/2}``.
    Pairs with eigenvalues closer than 1e-10 are deduplicated (first kept).
    """
    n = pairs.vectors.shape[0]
    if pairs.count == 0:
        return identity_operator(n)
    if np.any(pairs.values < 1.0 - 1e-8):
        raise InvalidSpectrum(f"LMP eigenvalues must be >= 1, got min {pairs.values.min():.3e}")
    pairs = _dedupe_pairs(pairs)
    W = pairs.vectors
    gram = W.T @ W
    if np.max(np.abs(gram - np.eye(W.shape[1]))) > 1e-6:
        raise InvalidSpectrum("LMP vectors are not orthonormal")
    coef = np.maximum(pairs.values, 1.0) ** power - 1.0

    def mv(v):
        return v + W @ (coef * (W.T @ v))

    return LinearOperator(n, n, mv, symmetric=True)


def _lmp_pairs_from_ritz(ritz: EigenPairs, k: int) -> EigenPairs:
    """Top-k Ritz pairs above one, orthonormalized, usable for an LMP."""
    if ritz is None or ritz.count == 0 or k == 0:
        return EigenPairs.empty(0 if ritz is None else ritz.vectors.shape[0])
    sel = _dedupe_pairs(ritz)
    mask = sel.values > 1.0 + 1e-8
    sel = EigenPairs(sel.values[mask], sel.vectors[:, mask]).top(k)
    if sel.count == 0:
        return sel
    Q, _ = np.linalg.qr(sel.vectors)
    return EigenPairs(sel.values, Q)


# --------------------------------------------------------------------------
# direct solutions


@dataclass
class OIResult:
    x: np.ndarray
    K: np.ndarray
    gain_gap: float


def optimal_interpolation(problem: VarProblem) -> OIResult:
    """Direct linear analysis ``x* = xb + K (y - H(xb))``, ``K = B H^T (H B H^T + R)^{-1}``.

    For a window (N > 0) ``H`` is the dense stacked operator of the
    linearized trajectory from ``xb``. The Sherman-Morrison-Woodbury form
    ``(B^{-1} + H^T R^{-1} H)^{-1} H^T R^{-1}`` is evaluated too and its
    relative distance from ``K`` is reported as ``gain_gap``.
    """
    traj = problem.trajectory(problem.xb)
    Hs = StackedObservation(problem, traj)
    n = problem.n
    if Hs.m == 0:
        return OIResult(problem.xb.copy(), np.zeros((n, 0)), 0.0)
    H = Hs.operator().to_dense()
    R = Hs.R_dense()
    B = problem.B.to_dense()
    S = H @ B @ H.T + R
    try:
        cS = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError:
        raise SingularInnovationCovariance("H B H^T + R is not invertible") from None
    BHt = B @ H.T
    K = np.linalg.solve(cS.T, np.linalg.solve(cS, BHt.T)).T
    x = problem.xb + K @ Hs.stacked_innovation()

    gap = np.nan
    try:
        Binv = problem.B.apply_inverse(np.eye(n))
        Rinv = Hs.R_apply  # block-wise inverse on columns
        RinvH = np.column_stack([Rinv(H[:, j], inverse=True) for j in range(n)])
        K_alt = np.linalg.solve(Binv + H.T @ RinvH, RinvH.T)
        gap = float(np.max(np.abs(K_alt - K)) / max(np.max(np.abs(K)), np.finfo(float).tiny))
    except AssimilaError:
        pass
    if np.isfinite(gap) and gap > 1e-8:
        warnings.warn(f"Kalman gain forms disagree (relative gap {gap:.2e}); "
                      "the problem is ill-conditioned", RuntimeWarning, stacklevel=2)
    return OIResult(x, K, gap)


def posterior_covariance(problem: VarProblem, x0=None) -> np.ndarray:
    """Inverse Gauss-Newton Hessian ``(B^{-1} + H^T R^{-1} H)^{-1}`` at ``x0`` (initial time)."""
    x0 = problem.xb if x0 is None else np.asarray(x0, dtype=float)
    Hs = StackedObservation(problem, problem.trajectory(x0))
    B = problem.B.to_dense()
    if Hs.m == 0:
        return B
    H = Hs.operator().to_dense()
    BHt = B @ H.T
    S = H @ BHt + Hs.R_dense()
    try:
        cS = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError:
        raise SingularInnovationCovariance("H B H^T + R is not invertible") from None
    G = np.linalg.solve(cS, BHt.T)
    A = B - G.T @ G
    A = 0.5 * (A + A.T)
    if np.linalg.eigvalsh(A).min() <= 0:
        raise NotPositiveDefinite("posterior covariance is not positive definite")
    return A


def propagate_covariance(model: Model, traj, P, Q=None) -> np.ndarray:
    """Carry ``P`` along ``traj`` with ``P <- M_i P M_i^T (+ Q)``; returns the final ``P``."""
    P = np.array(P, dtype=float)
    traj = np.asarray(traj)
    Qd = None if Q is None else as_covariance(Q, model.n).to_dense()
    for i in range(traj.shape[0] - 1):
        M = model.jacobian(traj[i], i)
        P = M @ P @ M.T
        if Qd is not None:
            P = P + Qd
        P = 0.5 * (P + P.T)
    return P


def dual_psas_solve(problem: VarProblem, x0=None, tol: float = 1e-10, max_iter=None,
                    full_output: bool = False):
    """Gauss-Newton increment from the observation-space (PSAS) system.

    Solves ``(H B H^T + R) lam = d - H b0`` by CG, with ``b0 = xb - x0``,
    and returns ``dx = b0 + B H^T lam``. At ``x0 = xb`` this is the classical
    ``dx = B H^T lam`` with ``(H B H^T + R) lam = d``.
    """
    x0 = problem.xb if x0 is None else np.asarray(x0, dtype=float)
    traj = problem.trajectory(x0)
    Hs = StackedObservation(problem, traj)
    b0 = problem.xb - x0
    if Hs.m == 0:
        return (b0, np.zeros(0), None) if full_output else b0
    d = Hs.stacked_innovation() - Hs.matvec(b0)

    def mv(lam):
        return Hs.matvec(problem.B.apply(Hs.rmatvec(lam))) + Hs.R_apply(lam)

    op = LinearOperator(Hs.m, Hs.m, mv, symmetric=True)
    res = conjugate_gradient(op, d, tol=tol, max_iter=max_iter, ritz=False)
    dx = b0 + problem.B.apply(Hs.rmatvec(res.x))
    return (dx, res.x, res) if full_output else dx


def dual_cost(lam, problem: VarProblem, x0=None) -> float:
    """``D(lam) = 1/2 lam^T (H B H^T + R) lam - lam^T d`` at ``x0 = xb``."""
    x0 = problem.xb if x0 is None else np.asarray(x0, dtype=float)
    Hs = StackedObservation(problem, problem.trajectory(x0))
    lam = np.asarray(lam, dtype=float)
    Al = Hs.matvec(problem.B.apply(Hs.rmatvec(lam))) + Hs.R_apply(lam)
    return float(0.5 * lam @ Al - lam @ Hs.stacked_innovation())


# --------------------------------------------------------------------------
# iterative solvers


def gauss_newton_increment(problem: VarProblem, x0, cg_tol=1e-8, max_iter=None,
                           precond: Optional[PreconditionerSpec] = None,
                           lmp_pairs: Optional[EigenPairs] = None):
    """Minimize the incremental quadratic cost at ``x0``.

    Returns ``(dx, cg_result, gradient)`` where ``gradient`` is the full cost
    gradient at ``x0`` (the negated right-hand side of the normal equations).
    ``cg_result.ritz`` lives in the transformed variables when a first-level
    change of variables is active.
    """
    precond = precond or PreconditionerSpec()
    x0 = np.asarray(x0, dtype=float)
    traj = problem.trajectory(x0)
    Hs = StackedObservation(problem, traj)
    B = problem.B
    b0 = problem.xb - x0
    if Hs.m:
        g_obs = Hs.rmatvec(Hs.R_apply(Hs.stacked_innovation(), inverse=True))
    else:
        g_obs = np.zeros(problem.n)
    rhs = B.apply_inverse(b0) + g_obs
    grad = -rhs

    if precond.level == "none":
        op = hessian_operator(problem, x0) if Hs.m else LinearOperator(
            problem.n, problem.n, B.apply_inverse, symmetric=True)
        res = conjugate_gradient(op, rhs, tol=cg_tol, max_iter=max_iter)
        return res.x, res, grad

    op = _first_level_from(B, Hs)
    rhs_t = B.sqrt_inverse_apply(b0) + B.sqrt_transpose_apply(g_obs)
    M = None
    if precond.level == "spectral_lmp" and lmp_pairs is not None and lmp_pairs.count:
        M = spectral_lmp(lmp_pairs)
    res = conjugate_gradient(op, rhs_t, precond=M, tol=cg_tol, max_iter=max_iter)
    return B.sqrt_apply(res.x), res, grad


def _armijo(f, x, J, gd, direction, alpha, cfg: DescentConfig):
    """Backtracking line search. Returns (alpha, J_new) or (None, None)."""
    for _ in range(cfg.max_backtracks + 1):
        xt = x + alpha * direction
        try:
            Jt = f(xt)
        except FloatingPointError:
            Jt = np.inf
        if np.isfinite(Jt) and Jt <= J + cfg.armijo * alpha * gd:
            return alpha, Jt
        alpha *= cfg.backtrack
    return None, None


def solve_strong4dvar(problem: VarProblem, config: Optional[DescentConfig] = None, x_init=None,
                      precond: Optional[PreconditionerSpec] = None):
    """Line-search descent on the strong-constraint cost.

    ``config.method`` selects steepest descent (Barzilai-Borwein trial steps)
    or Gauss-Newton directions. Every accepted step satisfies the Armijo
    condition, so the cost is non-increasing. Raises LineSearchFailure when
    no acceptable step exists.
    """
    cfg = config or DescentConfig()
    x = problem.xb.copy() if x_init is None else np.array(x_init, dtype=float)
    f = lambda z: cost_strong4dvar(z, problem)  # noqa: E731
    J = f(x)
    g = grad_strong4dvar(x, problem)
    diag = VarDiagnostics(costs=[J], grad_norms=[float(np.linalg.norm(g))])
    gscale = max(1.0, diag.grad_norms[0])
    s_prev = y_prev = None
    lmp_pairs = None
    for _ in range(cfg.outer_max):
        gnorm = np.linalg.norm(g)
        if gnorm <= cfg.grad_tol * gscale:
            diag.converged, diag.stop_reason = True, "grad_tol"
            break
        if cfg.method == "gauss_newton":
            d, res, _ = gauss_newton_increment(problem, x, cfg.cg_tol, cfg.inner_max, precond,
                                               lmp_pairs)
            diag.inner_iterations.append(res.iterations)
            if precond is not None and precond.level == "spectral_lmp" and lmp_pairs is None:
                lmp_pairs = precond.pairs or _lmp_pairs_from_ritz(res.ritz, precond.k)
            alpha0 = cfg.initial_step
            if g @ d >= 0:
                d = -g
                alpha0 = cfg.initial_step / gnorm
        else:
            d = -g
            if s_prev is not None and s_prev @ y_prev > 0:
                alpha0 = (s_prev @ s_prev) / (s_prev @ y_prev)
            else:
                alpha0 = cfg.initial_step / gnorm
        alpha, J_new = _armijo(f, x, J, g @ d, d, alpha0, cfg)
        if alpha is None:
            raise LineSearchFailure("no step satisfied the sufficient-decrease condition")
        step = alpha * d
        x = x + step
        g_new = grad_strong4dvar(x, problem)
        s_prev, y_prev = step, g_new - g
        g, J = g_new, J_new
        diag.accepted_steps += 1
        diag.costs.append(J)
        diag.grad_norms.append(float(np.linalg.norm(g)))
        if np.linalg.norm(step) <= cfg.step_tol * (1.0 + np.linalg.norm(x)):
            diag.converged, diag.stop_reason = True, "step_tol"
            break
    else:
        if np.linalg.norm(g) <= cfg.grad_tol * gscale:
            diag.converged, diag.stop_reason = True, "grad_tol"
        else:
            diag.stop_reason = "outer_max"
    return x, diag


def _gauss_newton_loop(problem: VarProblem, cfg: DescentConfig, x, increment):
    """Shared Armijo-safeguarded outer loop; ``increment(x)`` returns ``(dx, inner_iterations)``."""
    f = lambda z: cost_strong4dvar(z, problem)  # noqa: E731
    J = f(x)
    diag = VarDiagnostics(costs=[J])
    gscale = None
    increases = 0
    for _ in range(cfg.outer_max + 1):
        g = grad_strong4dvar(x, problem)
        gnorm = float(np.linalg.norm(g))
        diag.grad_norms.append(gnorm)
        if gscale is None:
            gscale = max(1.0, gnorm)
        if gnorm <= cfg.grad_tol * gscale:
            diag.converged, diag.stop_reason = True, "grad_tol"
            break
        if diag.accepted_steps >= cfg.outer_max:
            diag.stop_reason = "outer_max"
            break
        dx, its = increment(x)
        diag.inner_iterations.append(its)

        gd = g @ dx
        try:
            J_full = f(x + dx)
        except FloatingPointError:
            J_full = np.inf
        increases = increases + 1 if not J_full <= J else 0
        if increases >= 3:
            diag.diverged, diag.stop_reason = True, "diverged"
            break
        if gd >= 0:
            diag.line_search_failed, diag.stop_reason = True, "not_descent"
            break
        if J_full <= J + cfg.armijo * gd:
            alpha, J_new = 1.0, J_full
        else:
            alpha, J_new = _armijo(f, x, J, gd, dx, cfg.backtrack, cfg)
        if alpha is None:
            diag.line_search_failed, diag.stop_reason = True, "line_search"
            break
        step = alpha * dx
        x = x + step
        J = J_new
        diag.accepted_steps += 1
        diag.costs.append(J)
        if np.linalg.norm(step) <= cfg.step_tol * (1.0 + np.linalg.norm(x)):
            diag.converged, diag.stop_reason = True, "step_tol"
            break
    return x, diag


def incremental_4dvar(problem: VarProblem, config: Optional[DescentConfig] = None,
                      precond: Optional[PreconditionerSpec] = None, x_init=None):
    """Incremental 4D-Var: Gauss-Newton outer loop with inner CG.

    Outer steps are safeguarded by an Armijo backtracking search, so accepted
    iterates never increase the cost. If the raw Gauss-Newton step increases
    the cost three outer iterations in a row the loop stops and flags
    ``diagnostics.diverged``; the best iterate is returned either way.
    """
    cfg = config or DescentConfig()
    precond = precond or PreconditionerSpec()
    x = problem.xb.copy() if x_init is None else np.array(x_init, dtype=float)
    lmp = {"pairs": precond.pairs if precond.level == "spectral_lmp" else None}

    def increment(z):
        dx, res, _ = gauss_newton_increment(problem, z, cfg.cg_tol, cfg.inner_max, precond,
                                            lmp["pairs"])
        if precond.level == "spectral_lmp" and lmp["pairs"] is None:
            lmp["pairs"] = _lmp_pairs_from_ritz(res.ritz, precond.k)
        return dx, res.iterations

    return _gauss_newton_loop(problem, cfg, x, increment)


def psas_4dvar(problem: VarProblem, config: Optional[DescentConfig] = None, x_init=None):
    """Gauss-Newton outer loop whose increments come from the dual (PSAS) system."""
    cfg = config or DescentConfig()
    x = problem.xb.copy() if x_init is None else np.array(x_init, dtype=float)

    def increment(z):
        dx, _, res = dual_psas_solve(problem, z, tol=cfg.cg_tol, max_iter=cfg.inner_max,
                                     full_output=True)
        return dx, 0 if res is None else res.iterations

    return _gauss_newton_loop(problem, cfg, x, increment)


def solve_3dvar(problem: VarProblem, config: Optional[DescentConfig] = None,
                precond: Optional[PreconditionerSpec] = None):
    if problem.N != 0:
        raise ValueError("3D-Var needs a single-time problem (N = 0)")
    return incremental_4dvar(problem, config, precond)
