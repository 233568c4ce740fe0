"""Dense and matrix-free linear algebra shared by the solvers.

Everything here is a pure function of its inputs. Krylov workspaces are
allocated per call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    BreakdownError,
    ConvergenceFailure,
    DimensionMismatch,
    MaxIterations,
    NotPositiveDefinite,
)

SYMMETRY_TOL = 1e-12
DENSE_EIG_LIMIT = 512


class LinearOperator:
    """Matrix-free linear map ``R^dim_in -> R^dim_out``.

    ``rmatvec`` (the transpose action) is optional. Operators compose with
    ``@`` against vectors and other operators, and ``op.T`` swaps the two
    actions.
    """

    def __init__(self, dim_out: int, dim_in: int, matvec: Callable,
                 rmatvec: Optional[Callable] = None, symmetric: bool = False):
        if dim_out < 0 or dim_in < 0:
            raise DimensionMismatch("operator dimensions must be non-negative")
        self.dim_out = int(dim_out)
        self.dim_in = int(dim_in)
        self._matvec = matvec
        if symmetric and rmatvec is None:
            rmatvec = matvec
        self._rmatvec = rmatvec
        self.symmetric = symmetric

    @property
    def shape(self):
        return (self.dim_out, self.dim_in)

    @property
    def has_transpose(self):
        return self._rmatvec is not None

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim_in,):
            raise DimensionMismatch(f"expected vector of length {self.dim_in}, got shape {v.shape}")
        return np.asarray(self._matvec(v), dtype=float)

    def rmatvec(self, w):
        if self._rmatvec is None:
            raise NotImplementedError("operator has no transpose action")
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim_out,):
            raise DimensionMismatch(f"expected vector of length {self.dim_out}, got shape {w.shape}")
        return np.asarray(self._rmatvec(w), dtype=float)

    @property
    def T(self) -> "LinearOperator":
        if self._rmatvec is None:
            raise NotImplementedError("operator has no transpose action")
        return LinearOperator(self.dim_in, self.dim_out, self._rmatvec, self._matvec,
                              symmetric=self.symmetric)

    def __matmul__(self, other):
        if isinstance(other, LinearOperator):
            if other.dim_out != self.dim_in:
                raise DimensionMismatch("incompatible operator composition")
            rm = None
            if self.has_transpose and other.has_transpose:
                rm = lambda w: other.rmatvec(self.rmatvec(w))  # noqa: E731
            return LinearOperator(self.dim_out, other.dim_in,
                                  lambda v: self.matvec(other.matvec(v)), rm)
        return self.matvec(other)

    def to_dense(self) -> np.ndarray:
        """Materialize by applying the operator to every unit vector."""
        out = np.empty((self.dim_out, self.dim_in))
        e = np.zeros(self.dim_in)
        for j in range(self.dim_in):
            e[j] = 1.0
            out[:, j] = self.matvec(e)
            e[j] = 0.0
        return out

    def __repr__(self):
        return f"LinearOperator(shape={self.shape}, transpose={self.has_transpose})"


def aslinearoperator(A) -> LinearOperator:
    """Wrap a dense matrix (or pass an operator through)."""
    if isinstance(A, LinearOperator):
        return A
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return LinearOperator(A.shape[0], A.shape[1], lambda v: A @ v, lambda w: A.T @ w,
                          symmetric=is_symmetric(A) if A.shape[0] == A.shape[1] else False)


def identity_operator(n: int) -> LinearOperator:
    return LinearOperator(n, n, lambda v: v.copy(), symmetric=True)


def is_symmetric(A, tol: float = SYMMETRY_TOL) -> bool:
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    return bool(np.max(np.abs(A - A.T), initial=0.0) <= tol * scale)


def _require_square_symmetric(A, what="matrix"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"{what} must be square, got shape {A.shape}")
    if not is_symmetric(A):
        raise NotPositiveDefinite(f"{what} is not symmetric")
    return A


@dataclass
class EigenPairs:
    """``k`` eigenpairs with values sorted non-increasing.

    ``vectors`` has shape ``(n, k)``; columns are orthonormal unless the
    pairs came from a preconditioned CG run (see ``conjugate_gradient``).
    """

    values: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.values.size:
            raise DimensionMismatch("vectors must be an (n, k) array matching values")

    @property
    def count(self) -> int:
        return int(self.values.size)

    def __len__(self):
        return self.count

    def top(self, k: int) -> "EigenPairs":
        return EigenPairs(self.values[:k], self.vectors[:, :k])

    @classmethod
    def empty(cls, n: int) -> "EigenPairs":
        return cls(np.zeros(0), np.zeros((n, 0)))


def cholesky_lower(A) -> np.ndarray:
    """Lower-triangular ``L`` with ``A = L L^T``.

    Raises NotPositiveDefinite when a pivot is not strictly positive.
    """
    A = _require_square_symmetric(A)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"Cholesky factorization failed: {exc}") from None
    if not np.all(np.diag(L) > 0):
        raise NotPositiveDefinite("non-positive pivot in Cholesky factorization")
    return L


def _sorted_eigh(A):
    w, V = np.linalg.eigh(A)
    order = np.argsort(w)[::-1]
    return w[order], V[:, order]


def truncated_sym_eig(A, k: int, *, dense_limit: int = DENSE_EIG_LIMIT, tol: float = 1e-8,
                      seed: int = 0, max_restarts: int = 8) -> EigenPairs:
    """The ``k`` largest eigenpairs of a symmetric matrix or operator.

    Dense problems up to ``dense_limit`` use a full symmetric eigensolve. Larger
    ones (or matrix-free operators) run Lanczos with full reorthogonalization,
    enlarging the Krylov space until every retained pair has residual
    ``||A v - lam v|| <= tol * ||A||``.
    """
    if isinstance(A, LinearOperator):
        n = A.dim_in
        if A.dim_out != n:
            raise DimensionMismatch("operator must be square")
        dense = None
    else:
        dense = _require_square_symmetric(A)
        n = dense.shape[0]
    if not 1 <= k <= n:
        raise DimensionMismatch(f"need 1 <= k <= n, got k={k}, n={n}")
    if dense is not None and n <= dense_limit:
        w, V = _sorted_eigh(dense)
        return EigenPairs(w[:k], V[:, :k])

    op = aslinearoperator(dense) if dense is not None else A
    rng = np.random.default_rng(seed)
    m = min(n, max(2 * k + 20, 40))
    for _ in range(max_restarts):
        Q, alpha, beta = _lanczos_full(op, rng.standard_normal(n), m)
        j = alpha.size
        T = np.diag(alpha) + np.diag(beta[: j - 1], 1) + np.diag(beta[: j - 1], -1)
        theta, S = _sorted_eigh(T)
        kk = min(k, j)
        vecs = Q[:, :j] @ S[:, :kk]
        anorm = max(float(np.max(np.abs(theta))), np.finfo(float).tiny)
        res = np.array([np.linalg.norm(op.matvec(vecs[:, i]) - theta[i] * vecs[:, i])
                        for i in range(kk)])
        if kk == k and np.all(res <= tol * anorm):
            return EigenPairs(theta[:k], vecs)
        if m >= n:
            break
        m = min(n, 2 * m)
    raise ConvergenceFailure(f"Lanczos did not resolve {k} eigenpairs within the iteration cap")


def _lanczos_full(op: LinearOperator, v0, m: int):
    """Lanczos with full reorthogonalization. Stops early on invariant subspace."""
    n = v0.size
    Q = np.zeros((n, m))
    alpha = np.zeros(m)
    beta = np.zeros(m)
    q = v0 / np.linalg.norm(v0)
    for j in range(m):
        Q[:, j] = q
        w = op.matvec(q)
        alpha[j] = q @ w
        for _ in range(2):
            w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        b = np.linalg.norm(w)
        beta[j] = b
        if j + 1 == m:
            break
        if b <= 1e-13 * max(1.0, abs(alpha[j])):
            return Q[:, : j + 1], alpha[: j + 1], beta[: j + 1]
        q = w / b
    return Q, alpha, beta


def sym_sqrt(A) -> np.ndarray:
    """Symmetric square root of a symmetric positive semi-definite matrix."""
    A = _require_square_symmetric(A)
    w, V = np.linalg.eigh(A)
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w[0] < -1e-10 * scale:
        raise NotPositiveDefinite(f"matrix has negative eigenvalue {w[0]:.3e}")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def sym_inv_sqrt(A) -> np.ndarray:
    """Symmetric ``A^{-1/2}`` via eigendecomposition (small rank-space matrices)."""
    A = _require_square_symmetric(A)
    w, V = np.linalg.eigh(A)
    if w.size and not np.all(w > 0):
        raise NotPositiveDefinite(f"matrix has non-positive eigenvalue {w.min():.3e}")
    X = (V / np.sqrt(w)) @ V.T
    return 0.5 * (X + X.T)


@dataclass
class KrylovResult:
    """Outcome of a Krylov solve.

    ``residual_norms[j]`` is the residual norm after ``j`` iterations (true
    residual for CG; the minimum-residual recurrence estimate for MINRES).
    """

    x: np.ndarray
    iterations: int
    converged: bool
    residual_norms: list = field(default_factory=list)
    ritz: Optional[EigenPairs] = None

    def __iter__(self):
        # (solution, iteration count, eigen-estimates or residual history)
        yield self.x
        yield self.iterations
        yield self.ritz if self.ritz is not None else self.residual_norms


def _as_op(A, n=None):
    if A is None:
        return None
    if callable(A) and not isinstance(A, LinearOperator):
        return LinearOperator(n, n, A, symmetric=True)
    return aslinearoperator(A)


def conjugate_gradient(A, b, precond=None, tol: float = 1e-8, max_iter: Optional[int] = None,
                       x0=None, ritz: bool = True, raise_on_maxiter: bool = False,
                       callback=None) -> KrylovResult:
    """Preconditioned conjugate gradients with Lanczos Ritz estimates.

    Stops once ``||b - A x|| <= tol * ||b||``. ``precond`` applies an SPD
    approximation of ``A^{-1}``.

    The CG coefficients define the Lanczos tridiagonal of the (preconditioned)
    operator, whose eigenpairs are returned in ``result.ritz`` sorted
    descending. Without a preconditioner the Ritz vectors are Euclidean
    orthonormal (up to the usual Lanczos loss of orthogonality). With one the
    values approximate the spectrum of ``precond @ A`` and the vectors are
    orthonormal in the ``precond^{-1}`` inner product.

    Raises BreakdownError on non-positive curvature ``p^T A p <= 0``. If the
    cap is reached the best iterate is returned with ``converged=False``, or
    MaxIterations is raised when ``raise_on_maxiter`` is set.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    A = _as_op(A, n)
    M = _as_op(precond, n)
    if A.shape != (n, n):
        raise DimensionMismatch(f"operator shape {A.shape} incompatible with rhs length {n}")
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A.matvec(x) if x0 is not None else b.copy()
    bnorm = np.linalg.norm(b)
    target = tol * bnorm
    rnorm = np.linalg.norm(r)
    history = [rnorm]
    if rnorm <= target or rnorm == 0.0:
        return KrylovResult(x, 0, True, history, EigenPairs.empty(n) if ritz else None)

    z = M.matvec(r) if M is not None else r.copy()
    rz = r @ z
    if rz <= 0:
        raise BreakdownError("preconditioner is not positive definite")
    p = z.copy()
    alphas, betas, lanczos = [], [], []
    converged = False
    it = 0
    while it < max_iter:
        if ritz:
            lanczos.append(((-1) ** it) * z / np.sqrt(rz))
        Ap = A.matvec(p)
        curv = p @ Ap
        if not curv > 0:
            raise BreakdownError(f"non-positive curvature p^T A p = {curv:.3e} at iteration {it}")
        alpha = rz / curv
        x = x + alpha * p
        r = r - alpha * Ap
        it += 1
        alphas.append(alpha)
        rnorm = np.linalg.norm(r)
        history.append(rnorm)
        if callback is not None:
            callback(x)
        if rnorm <= target:
            converged = True
            break
        z = M.matvec(r) if M is not None else r
        rz_new = r @ z
        if rz_new <= 0:
            raise BreakdownError("preconditioner is not positive definite")
        beta = rz_new / rz
        betas.append(beta)
        rz = rz_new
        p = z + beta * p

    pairs = _ritz_from_cg(alphas, betas, lanczos) if ritz else None
    result = KrylovResult(x, it, converged, history, pairs)
    if not converged and raise_on_maxiter:
        raise MaxIterations(f"CG did not converge in {max_iter} iterations", result)
    return result


def _ritz_from_cg(alphas, betas, lanczos):
    k = len(alphas)
    n = lanczos[0].size
    if k == 0:
        return EigenPairs.empty(n)
    a = np.asarray(alphas)
    bt = np.asarray(betas[: k - 1])
    diag = 1.0 / a
    diag[1:] += bt / a[:-1]
    off = np.sqrt(bt) / a[:-1]
    T = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    theta, S = _sorted_eigh(T)
    V = np.column_stack(lanczos[:k])
    return EigenPairs(theta, V @ S)


def sym_indef_solve(K, rhs, precond=None, tol: float = 1e-8, max_iter: Optional[int] = None,
                    raise_on_maxiter: bool = False) -> KrylovResult:
    """MINRES for symmetric (possibly indefinite) systems.

    ``precond`` must be SPD (it applies an approximate inverse). The residual
    history is the minimum-residual recurrence norm, which is non-increasing;
    it is the Euclidean residual when unpreconditioned and the
    ``precond``-weighted residual otherwise. Convergence is declared on the
    true residual ``||rhs - K x|| <= tol * ||rhs||``.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size
    K = _as_op(K, n)
    M = _as_op(precond, n)
    if K.shape != (n, n):
        raise DimensionMismatch(f"operator shape {K.shape} incompatible with rhs length {n}")
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros(n)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return KrylovResult(x, 0, True, [0.0])
    target = tol * bnorm

    eps = np.finfo(float).eps
    r1 = rhs.copy()
    y = M.matvec(r1) if M is not None else r1.copy()
    beta1 = r1 @ y
    if beta1 <= 0:
        raise BreakdownError("preconditioner is not positive definite")
    beta1 = np.sqrt(beta1)
    oldb, beta, dbar, epsln = 0.0, beta1, 0.0, 0.0
    phibar = beta1
    cs, sn = -1.0, 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    r2 = r1.copy()
    history = [phibar]
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        v = y / beta
        y = K.matvec(v)
        if it >= 2:
            y = y - (beta / oldb) * r1
        alfa = v @ y
        y = y - (alfa / beta) * r2
        r1, r2 = r2, y
        y = M.matvec(r2) if M is not None else r2
        oldb = beta
        beta2 = r2 @ y
        if beta2 < 0:
            raise BreakdownError("preconditioner is not positive definite")
        beta = np.sqrt(beta2)

        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(np.hypot(gbar, beta), eps)
        cs, sn = gbar / gamma, beta / gamma
        phi = cs * phibar
        phibar = sn * phibar

        w1, w2 = w2, w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w
        # |sn| <= 1, so the recurrence norm can only shrink
        history.append(phibar)

        exhausted = beta <= eps * beta1
        if phibar <= tol * beta1 or exhausted:
            if np.linalg.norm(rhs - K.matvec(x)) <= target:
                converged = True
                break
            if exhausted:
                break
    result = KrylovResult(x, it, converged, history)
    if not converged and raise_on_maxiter:
        raise MaxIterations(f"MINRES did not converge in {max_iter} iterations", result)
    return result
