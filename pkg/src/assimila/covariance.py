"""Covariance operators: diagonal, dense SPD, and low-rank square-root form.

Each representation exposes the same actions: ``apply``, ``apply_inverse``,
``sqrt_apply`` / ``sqrt_transpose_apply`` (a factor ``L`` with ``C = L L^T``),
``sqrt_inverse_apply`` and ``sample``. Factors are computed once at
construction; instances are immutable afterwards.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite, SingularCovariance
from .linalg import LinearOperator, cholesky_lower, is_symmetric


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class Covariance:
    dim: int
    sqrt_dim: int

    def _check(self, v, n=None):
        v = np.asarray(v, dtype=float)
        n = self.dim if n is None else n
        if v.shape[-1:] != (n,):
            raise DimensionMismatch(f"expected trailing dimension {n}, got shape {v.shape}")
        return v

    def apply(self, v) -> np.ndarray:
        raise NotImplementedError

    def apply_inverse(self, v) -> np.ndarray:
        raise NotImplementedError

    def sqrt_apply(self, z) -> np.ndarray:
        raise NotImplementedError

    def sqrt_transpose_apply(self, v) -> np.ndarray:
        raise NotImplementedError

    def sqrt_inverse_apply(self, v) -> np.ndarray:
        """``L^{-1} v`` for the factor used by ``sqrt_apply``."""
        raise NotImplementedError

    def to_dense(self) -> np.ndarray:
        raise NotImplementedError

    def sample(self, seed=None, size=None) -> np.ndarray:
        """Draw ``L z`` with ``z`` standard normal.

        ``seed`` may be an int or a ``numpy.random.Generator``. With ``size``
        the result has shape ``(size, dim)``, rows in draw order.
        """
        rng = np.random.default_rng(seed)
        if size is None:
            return self.sqrt_apply(rng.standard_normal(self.sqrt_dim))
        z = rng.standard_normal((size, self.sqrt_dim))
        return self.sqrt_apply(z)

    def mahalanobis_sq(self, v) -> float:
        v = self._check(v)
        return float(max(v @ self.apply_inverse(v), 0.0))

    def as_operator(self) -> LinearOperator:
        return LinearOperator(self.dim, self.dim, self.apply, symmetric=True)

    def inverse_operator(self) -> LinearOperator:
        return LinearOperator(self.dim, self.dim, self.apply_inverse, symmetric=True)

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class DiagonalCovariance(Covariance):
    def __init__(self, variances):
        var = np.atleast_1d(np.asarray(variances, dtype=float))
        if var.ndim != 1 or var.size == 0:
            raise DimensionMismatch("variances must be a non-empty vector")
        if np.any(var < 0) or not np.all(np.isfinite(var)):
            raise NotPositiveDefinite("variances must be finite and non-negative")
        self.variances = _frozen(var)
        self._sd = _frozen(np.sqrt(var))
        self.dim = self.sqrt_dim = var.size

    @classmethod
    def scalar(cls, n: int, variance: float) -> "DiagonalCovariance":
        return cls(np.full(n, float(variance)))

    def apply(self, v):
        return self._check(v) * self.variances

    def _require_invertible(self):
        if np.any(self.variances == 0):
            raise SingularCovariance("diagonal covariance has zero variances")

    def apply_inverse(self, v):
        self._require_invertible()
        return self._check(v) / self.variances

    def sqrt_apply(self, z):
        return self._check(z) * self._sd

    sqrt_transpose_apply = sqrt_apply

    def sqrt_inverse_apply(self, v):
        self._require_invertible()
        return self._check(v) / self._sd

    def to_dense(self):
        return np.diag(self.variances)


class DenseCovariance(Covariance):
    """Dense SPD covariance with its Cholesky factor cached."""

    def __init__(self, matrix):
        C = np.array(matrix, dtype=float, ndmin=2)
        if C.shape[0] != C.shape[1]:
            raise DimensionMismatch(f"covariance must be square, got {C.shape}")
        if not is_symmetric(C):
            raise NotPositiveDefinite("covariance matrix is not symmetric")
        C = 0.5 * (C + C.T)
        self.matrix = _frozen(C)
        self.L = _frozen(cholesky_lower(C))
        self.dim = self.sqrt_dim = C.shape[0]

    def apply(self, v):
        return self._check(v) @ self.matrix.T

    def apply_inverse(self, v):
        v = self._check(v)
        y = solve_triangular(self.L, v.T, lower=True)
        return solve_triangular(self.L.T, y, lower=False).T

    def sqrt_apply(self, z):
        return self._check(z) @ self.L.T

    def sqrt_transpose_apply(self, v):
        return self._check(v) @ self.L

    def sqrt_inverse_apply(self, v):
        return solve_triangular(self.L, self._check(v).T, lower=True).T

    def to_dense(self):
        return np.array(self.matrix)


class LowRankCovariance(Covariance):
    """``C = S S^T`` with ``S`` of shape ``(n, r)``. Never inverted."""

    def __init__(self, S):
        S = np.array(S, dtype=float, ndmin=2)
        if S.ndim != 2 or S.shape[1] < 1:
            raise DimensionMismatch("low-rank factor must be an (n, r) matrix with r >= 1")
        if not np.all(np.isfinite(S)):
            raise NotPositiveDefinite("low-rank factor has non-finite entries")
        self.S = _frozen(S)
        self.dim, self.sqrt_dim = S.shape

    @property
    def rank(self) -> int:
        return self.sqrt_dim

    def apply(self, v):
        v = self._check(v)
        return (v @ self.S) @ self.S.T

    def apply_inverse(self, v):
        raise SingularCovariance("low-rank covariance has no inverse")

    def sqrt_inverse_apply(self, v):
        raise SingularCovariance("low-rank covariance has no inverse")

    def sqrt_apply(self, z):
        return self._check(z, self.sqrt_dim) @ self.S.T

    def sqrt_transpose_apply(self, v):
        return self._check(v) @ self.S

    def to_dense(self):
        return self.S @ self.S.T


def as_covariance(C, dim=None) -> Covariance:
    """Coerce a Covariance, scalar, variance vector or dense matrix."""
    if isinstance(C, Covariance):
        cov = C
    else:
        a = np.asarray(C, dtype=float)
        if a.ndim == 0:
            if dim is None:
                raise DimensionMismatch("scalar covariance needs an explicit dimension")
            cov = DiagonalCovariance.scalar(dim, float(a))
        elif a.ndim == 1:
            cov = DiagonalCovariance(a)
        else:
            cov = DenseCovariance(a)
    if dim is not None and cov.dim != dim:
        raise DimensionMismatch(f"covariance dimension {cov.dim} != {dim}")
    return cov


def apply(C: Covariance, v):
    return C.apply(v)


def apply_inverse(C: Covariance, v):
    return C.apply_inverse(v)


def sqrt_apply(C: Covariance, v):
    return C.sqrt_apply(v)


def sqrt_transpose_apply(C: Covariance, v):
    return C.sqrt_transpose_apply(v)


def sample(C: Covariance, seed=None, size=None):
    return C.sample(seed, size)


def mahalanobis_sq(v, C: Covariance) -> float:
    """``v^T C^{-1} v``."""
    return C.mahalanobis_sq(v)


def gaussian_correlation_B(n: int, length_scale: float, variance: float,
                           jitter: float = 1e-10) -> DenseCovariance:
    """Gaussian-correlated covariance on a periodic unit-spaced grid of ``n`` cells.

    ``B_ij = variance * exp(-d_ij^2 / (2 L^2))`` plus ``jitter * variance`` on
    the diagonal. ``d_ij`` is the chordal distance of the grid wrapped onto a
    circle of circumference ``n``; it matches the index distance for nearby
    cells and, unlike the wrapped index distance, keeps the kernel positive
    definite for any ``n`` and ``length_scale``.
    """
    if not length_scale > 0:
        raise ValueError("length_scale must be positive")
    if not variance > 0:
        raise ValueError("variance must be positive")
    idx = np.arange(n)
    d = (n / np.pi) * np.abs(np.sin(np.pi * (idx[:, None] - idx[None, :]) / n))
    with np.errstate(under="ignore"):
        B = variance * np.exp(-(d ** 2) / (2.0 * length_scale ** 2))
    B[np.diag_indices(n)] += jitter * variance
    return DenseCovariance(B)
