"""Weak-constraint 4D-Var over full trajectories.

The inner problem at trajectory ``x`` minimizes

    1/2 ||L dx - b||^2_{D^{-1}} + 1/2 ||d - H dx||^2_{R^{-1}}

with ``L`` the all-at-once linearized model (unit lower block-bidiagonal),
``H`` the block-diagonal observation operator over observed times,
``D = diag(B, Q_1, ..., Q_N)`` and ``R`` the block-diagonal observation
error covariance. It is solved either through the symmetric indefinite
saddle-point system or through the SPD normal equations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .covariance import as_covariance
from .errors import DimensionMismatch
from .linalg import LinearOperator, conjugate_gradient, sym_indef_solve
from .variational import DescentConfig, VarDiagnostics, VarProblem, _armijo


@dataclass
class WeakProblem(VarProblem):
    """A ``VarProblem`` plus model-error covariances ``Q_1..Q_N``.

    ``Q`` is one covariance shared by every step or a list of ``N``.
    """

    Q: object = None

    def __post_init__(self):
        super().__post_init__()
        if self.Q is None:
            raise ValueError("weak-constraint problems need model-error covariances Q")
        if isinstance(self.Q, (list, tuple)):
            if len(self.Q) != self.N:
                raise DimensionMismatch(f"need {self.N} model-error covariances, got {len(self.Q)}")
            self.Q = [as_covariance(q, self.n) for q in self.Q]
        else:
            self.Q = as_covariance(self.Q, self.n)
        for i in range(1, self.N + 1):
            # Q_i must be invertible: this raises SingularCovariance otherwise
            self.Q_at(i).mahalanobis_sq(np.ones(self.n))

    def Q_at(self, i: int):
        """Model-error covariance of the step from time ``i-1`` to ``i``."""
        return self.Q[i - 1] if isinstance(self.Q, list) else self.Q


def cost_weak4dvar(x, problem: WeakProblem) -> float:
    """Observation, model-error and background terms for trajectory ``x`` (shape ``(N+1, n)``)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.N + 1, problem.n):
        raise DimensionMismatch(f"trajectory must have shape {(problem.N + 1, problem.n)}")
    Jo = sum(0.5 * R.mahalanobis_sq(d) for _, d, R in problem.innovations(x))
    Jq = 0.0
    for i in range(problem.N):
        eta = x[i + 1] - problem.model.step(x[i], i)
        Jq += 0.5 * problem.Q_at(i + 1).mahalanobis_sq(eta)
    Jb = 0.5 * problem.B.mahalanobis_sq(x[0] - problem.xb)
    return Jo + Jq + Jb


@dataclass
class BlockOperators:
    """Matrix-free all-at-once operators linearized about a trajectory."""

    problem: WeakProblem
    traj: np.ndarray

    def __post_init__(self):
        self.traj = np.asarray(self.traj, dtype=float)
        pr = self.problem
        if self.traj.shape != (pr.N + 1, pr.n):
            raise DimensionMismatch("linearization trajectory has the wrong shape")
        self.n, self.N = pr.n, pr.N
        self.times = list(pr.obs.times)
        self.p = pr.obs_operator.p
        self.state_dim = (self.N + 1) * self.n
        self.obs_dim = self.p * len(self.times)
        self.L = LinearOperator(self.state_dim, self.state_dim, self._L, self._LT)
        self.H = LinearOperator(self.obs_dim, self.state_dim, self._H, self._HT)

    def _blocks(self, v):
        return np.asarray(v, dtype=float).reshape(self.N + 1, self.n)

    def _L(self, v):
        v = self._blocks(v)
        out = v.copy()
        for i in range(self.N):
            out[i + 1] -= self.problem.model.tangent_linear(self.traj[i], v[i], i)
        return out.ravel()

    def _LT(self, w):
        w = self._blocks(w)
        out = w.copy()
        for i in range(self.N):
            out[i] -= self.problem.model.adjoint(self.traj[i], w[i + 1], i)
        return out.ravel()

    def L_solve(self, b):
        """Forward substitution: ``L^{-1} b``."""
        b = self._blocks(b)
        out = np.empty_like(b)
        out[0] = b[0]
        for i in range(self.N):
            out[i + 1] = b[i + 1] + self.problem.model.tangent_linear(self.traj[i], out[i], i)
        return out.ravel()

    def LT_solve(self, b):
        """Backward substitution: ``L^{-T} b``."""
        b = self._blocks(b)
        out = np.empty_like(b)
        out[self.N] = b[self.N]
        for i in range(self.N - 1, -1, -1):
            out[i] = b[i] + self.problem.model.adjoint(self.traj[i], out[i + 1], i)
        return out.ravel()

    def _H(self, v):
        v = self._blocks(v)
        H = self.problem.obs_operator
        if not self.times:
            return np.zeros(0)
        return np.concatenate([H.tangent_linear(self.traj[t], v[t]) for t in self.times])

    def _HT(self, w):
        w = np.asarray(w, dtype=float)
        H = self.problem.obs_operator
        out = np.zeros((self.N + 1, self.n))
        for k, t in enumerate(self.times):
            out[t] += H.adjoint(self.traj[t], w[k * self.p:(k + 1) * self.p])
        return out.ravel()

    def _D_cov(self, i):
        return self.problem.B if i == 0 else self.problem.Q_at(i)

    def D_apply(self, v, inverse=False):
        v = self._blocks(v)
        out = np.empty_like(v)
        for i in range(self.N + 1):
            C = self._D_cov(i)
            out[i] = C.apply_inverse(v[i]) if inverse else C.apply(v[i])
        return out.ravel()

    def R_apply(self, w, inverse=False):
        w = np.asarray(w, dtype=float)
        out = np.empty_like(w)
        for k in range(len(self.times)):
            C = self.problem.obs.covariance(k)
            blk = slice(k * self.p, (k + 1) * self.p)
            out[blk] = C.apply_inverse(w[blk]) if inverse else C.apply(w[blk])
        return out

    # dense forms, for small-scale checks
    def D_dense(self):
        D = np.zeros((self.state_dim, self.state_dim))
        for i in range(self.N + 1):
            s = slice(i * self.n, (i + 1) * self.n)
            D[s, s] = self._D_cov(i).to_dense()
        return D

    def R_dense(self):
        R = np.zeros((self.obs_dim, self.obs_dim))
        for k in range(len(self.times)):
            s = slice(k * self.p, (k + 1) * self.p)
            R[s, s] = self.problem.obs.covariance(k).to_dense()
        return R

    def saddle_operator(self) -> LinearOperator:
        ns, m = self.state_dim, self.obs_dim

        def mv(z):
            lam, mu, dx = z[:ns], z[ns:ns + m], z[ns + m:]
            return np.concatenate([self.D_apply(lam) + self.L.matvec(dx),
                                   self.R_apply(mu) + self.H.matvec(dx),
                                   self.L.rmatvec(lam) + self.H.rmatvec(mu)])

        return LinearOperator(2 * ns + m, 2 * ns + m, mv, symmetric=True)

    def saddle_matrix(self) -> np.ndarray:
        ns, m = self.state_dim, self.obs_dim
        L = self.L.to_dense()
        H = self.H.to_dense() if m else np.zeros((0, ns))
        K = np.zeros((2 * ns + m, 2 * ns + m))
        K[:ns, :ns] = self.D_dense()
        K[:ns, ns + m:] = L
        K[ns:ns + m, ns:ns + m] = self.R_dense()
        K[ns:ns + m, ns + m:] = H
        K[ns + m:, :ns] = L.T
        K[ns + m:, ns:ns + m] = H.T
        return K

    def block_preconditioner(self) -> LinearOperator:
        """SPD ``diag(D, R, L^T D^{-1} L)^{-1}``; the last block is applied exactly as ``L^{-1} D L^{-T}``."""
        ns, m = self.state_dim, self.obs_dim

        def mv(z):
            lam, mu, dx = z[:ns], z[ns:ns + m], z[ns + m:]
            return np.concatenate([self.D_apply(lam, inverse=True),
                                   self.R_apply(mu, inverse=True),
                                   self.L_solve(self.D_apply(self.LT_solve(dx)))])

        return LinearOperator(2 * ns + m, 2 * ns + m, mv, symmetric=True)


def assemble_blocks(problem: WeakProblem, linearization) -> BlockOperators:
    return BlockOperators(problem, linearization)


def weak_rhs(problem: WeakProblem, traj):
    """``b = [xb - x_0, M(x_0) - x_1, ...]`` and stacked innovations ``d``."""
    traj = np.asarray(traj, dtype=float)
    b = np.empty((problem.N + 1, problem.n))
    b[0] = problem.xb - traj[0]
    for i in range(problem.N):
        b[i + 1] = problem.model.step(traj[i], i) - traj[i + 1]
    inn = problem.innovations(traj)
    d = np.concatenate([di for _, di, _ in inn]) if inn else np.zeros(0)
    return b.ravel(), d


def linearized_weak_cost(dx, blocks: BlockOperators, b, d) -> float:
    dx = np.asarray(dx, dtype=float)
    rb = blocks.L.matvec(dx) - b
    rd = d - blocks.H.matvec(dx)
    return float(0.5 * rb @ blocks.D_apply(rb, inverse=True)
                 + 0.5 * rd @ blocks.R_apply(rd, inverse=True))


def grad_linearized_weak_cost(dx, blocks: BlockOperators, b, d) -> np.ndarray:
    dx = np.asarray(dx, dtype=float)
    rb = blocks.L.matvec(dx) - b
    rd = d - blocks.H.matvec(dx)
    return blocks.L.rmatvec(blocks.D_apply(rb, inverse=True)) - blocks.H.rmatvec(
        blocks.R_apply(rd, inverse=True))


@dataclass
class SaddleSolution:
    lam: np.ndarray
    mu: np.ndarray
    dx: np.ndarray
    iterations: int = 0
    converged: bool = True
    residual_norms: list = field(default_factory=list)


def saddle_solve(blocks: BlockOperators, b, d, tol: float = 1e-8, max_iter=None,
                 precond=None) -> SaddleSolution:
    """Solve ``[[D, 0, L], [0, R, H], [L^T, H^T, 0]] (lam, mu, dx) = (b, d, 0)`` by MINRES.

    ``precond`` may be ``None``, ``"block"`` (see
    ``BlockOperators.block_preconditioner``) or an SPD LinearOperator.
    """
    ns, m = blocks.state_dim, blocks.obs_dim
    b = np.asarray(b, dtype=float)
    d = np.asarray(d, dtype=float)
    if b.shape != (ns,) or d.shape != (m,):
        raise DimensionMismatch("right-hand sides do not match the block operators")
    if isinstance(precond, str):
        if precond != "block":
            raise ValueError(f"unknown saddle preconditioner {precond!r}")
        precond = blocks.block_preconditioner()
    rhs = np.concatenate([b, d, np.zeros(ns)])
    res = sym_indef_solve(blocks.saddle_operator(), rhs, precond=precond, tol=tol,
                          max_iter=max_iter)
    z = res.x
    return SaddleSolution(z[:ns], z[ns:ns + m], z[ns + m:], res.iterations, res.converged,
                          res.residual_norms)


@dataclass
class NormalSolution:
    dx: np.ndarray
    iterations: int
    converged: bool


def normal_equations_solve(blocks: BlockOperators, b, d, tol: float = 1e-8,
                           max_iter=None) -> NormalSolution:
    """CG on ``(L^T D^{-1} L + H^T R^{-1} H) dx = L^T D^{-1} b + H^T R^{-1} d``."""
    ns = blocks.state_dim

    def mv(v):
        return (blocks.L.rmatvec(blocks.D_apply(blocks.L.matvec(v), inverse=True))
                + blocks.H.rmatvec(blocks.R_apply(blocks.H.matvec(v), inverse=True)))

    rhs = blocks.L.rmatvec(blocks.D_apply(b, inverse=True)) + blocks.H.rmatvec(
        blocks.R_apply(d, inverse=True))
    res = conjugate_gradient(LinearOperator(ns, ns, mv, symmetric=True), rhs, tol=tol,
                             max_iter=max_iter, ritz=False)
    return NormalSolution(res.x, res.iterations, res.converged)


def solve_weak4dvar(problem: WeakProblem, config: Optional[DescentConfig] = None,
                    inner: str = "saddle", x_init=None, precond=None):
    """Gauss-Newton over the stacked trajectory with Armijo-safeguarded steps.

    Starts from the background propagated through the model unless
    ``x_init`` is given. Returns ``(trajectory, diagnostics)``.
    """
    if inner not in ("saddle", "normal"):
        raise ValueError(f"unknown inner solver {inner!r}")
    cfg = config or DescentConfig()
    N, n = problem.N, problem.n
    if x_init is None:
        x = problem.model.propagate(problem.xb, N)
    else:
        x = np.array(x_init, dtype=float).reshape(N + 1, n)
    f = lambda z: cost_weak4dvar(z.reshape(N + 1, n), problem)  # noqa: E731
    J = f(x)
    diag = VarDiagnostics(costs=[J])
    gscale = None
    increases = 0
    for _ in range(cfg.outer_max + 1):
        blocks = assemble_blocks(problem, x)
        b, d = weak_rhs(problem, x)
        # gradient of the full cost equals the linearized one at dx = 0
        g = grad_linearized_weak_cost(np.zeros(blocks.state_dim), blocks, b, d)
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
        if inner == "saddle":
            sol = saddle_solve(blocks, b, d, tol=cfg.cg_tol, max_iter=cfg.inner_max,
                               precond=precond)
        else:
            sol = normal_equations_solve(blocks, b, d, tol=cfg.cg_tol, max_iter=cfg.inner_max)
        diag.inner_iterations.append(sol.iterations)
        dx = sol.dx.reshape(N + 1, n)

        gd = float(g @ sol.dx)
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
        x = x + alpha * dx
        J = J_new
        diag.accepted_steps += 1
        diag.costs.append(J)
        if alpha * np.linalg.norm(dx) <= cfg.step_tol * (1.0 + np.linalg.norm(x)):
            diag.converged, diag.stop_reason = True, "step_tol"
            break
    return x, diag
