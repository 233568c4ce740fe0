"""Toy dynamical models with exact discrete tangent-linear and adjoint actions.

The Lorenz systems are advanced by one classical RK4 step per model step.
Tangent-linear and adjoint code differentiates those RK4 stages directly,
so the adjoint identity holds to rounding error.

States are plain float arrays. ``step`` also accepts a stack of states with
shape ``(r, n)`` (one row per ensemble member).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NonFiniteState

KINDS = ("lorenz63", "lorenz96", "linear_advection", "linear")


@dataclass(frozen=True)
class Model:
    """An immutable, time-invariant model step ``x_{i+1} = M(x_i)``.

    Methods take an optional time index ``i`` so time-dependent models fit
    the same interface; the shipped models ignore it.
    """

    kind: str
    n: int
    dt: float
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    forcing: float = 8.0
    speed: float = 1.0
    matrix: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.kind == "lorenz63" and self.n != 3:
            raise DimensionMismatch("lorenz63 has dimension 3")
        if self.kind == "lorenz96" and self.n < 4:
            raise DimensionMismatch("lorenz96 needs n >= 4")
        if self.kind == "linear":
            if self.matrix is None:
                raise ValueError("linear model needs a matrix")
            m = np.array(self.matrix, dtype=float, ndmin=2)
            if m.shape != (self.n, self.n):
                raise DimensionMismatch(f"matrix shape {m.shape} does not match n={self.n}")
            m.setflags(write=False)
            object.__setattr__(self, "matrix", m)
        if self.n < 1:
            raise DimensionMismatch("model dimension must be positive")

    @property
    def is_linear(self) -> bool:
        return self.kind in ("linear_advection", "linear")

    # ---- right-hand sides -------------------------------------------------
    def _rhs(self, x):
        if self.kind == "lorenz63":
            X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
            return np.stack([self.sigma * (Y - X), X * (self.rho - Z) - Y, X * Y - self.beta * Z],
                            axis=-1)
        # lorenz96
        return ((np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1)
                - x + self.forcing)

    def _rhs_tl(self, x, dx):
        if self.kind == "lorenz63":
            X, Y, Z = x
            dX, dY, dZ = dx
            return np.array([self.sigma * (dY - dX),
                             dX * (self.rho - Z) - X * dZ - dY,
                             dX * Y + X * dY - self.beta * dZ])
        return ((np.roll(dx, -1) - np.roll(dx, 2)) * np.roll(x, 1)
                + (np.roll(x, -1) - np.roll(x, 2)) * np.roll(dx, 1) - dx)

    def _rhs_ad(self, x, lam):
        if self.kind == "lorenz63":
            X, Y, Z = x
            a, b, c = lam
            return np.array([-self.sigma * a + (self.rho - Z) * b + Y * c,
                             self.sigma * a - b + X * c,
                             -X * b - self.beta * c])
        return (np.roll(x, 2) * np.roll(lam, 1)
                + (np.roll(x, -2) - np.roll(x, 1)) * np.roll(lam, -1)
                - np.roll(x, -1) * np.roll(lam, -2) - lam)

    def _stages(self, x):
        h = self.dt
        x2 = x + 0.5 * h * self._rhs(x)
        x3 = x + 0.5 * h * self._rhs(x2)
        x4 = x + h * self._rhs(x3)
        return x2, x3, x4

    # ---- advection helpers ------------------------------------------------
    def _shift(self):
        s = self.speed * self.dt
        m = int(np.floor(s))
        return m, s - m

    def _advect(self, x):
        m, f = self._shift()
        out = np.roll(x, m, axis=-1)
        if f:
            out = (1.0 - f) * out + f * np.roll(x, m + 1, axis=-1)
        return out

    def _advect_T(self, lam):
        m, f = self._shift()
        out = np.roll(lam, -m)
        if f:
            out = (1.0 - f) * out + f * np.roll(lam, -m - 1)
        return out

    # ---- public actions ---------------------------------------------------
    def _check(self, x, what="state"):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.n,):
            raise DimensionMismatch(f"{what} has shape {x.shape}, model dimension is {self.n}")
        return x

    def step(self, x, i: int = 0) -> np.ndarray:
        """Advance one model step. Raises NonFiniteState on overflow."""
        x = self._check(x)
        if self.kind == "linear_advection":
            out = self._advect(x)
        elif self.kind == "linear":
            out = x @ self.matrix.T
        else:
            h = self.dt
            with np.errstate(over="ignore", invalid="ignore"):
                k1 = self._rhs(x)
                k2 = self._rhs(x + 0.5 * h * k1)
                k3 = self._rhs(x + 0.5 * h * k2)
                k4 = self._rhs(x + h * k3)
                out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(out)):
            raise NonFiniteState(f"{self.kind} step produced non-finite values", index=i + 1)
        return out

    def tangent_linear(self, base, dx, i: int = 0) -> np.ndarray:
        """Jacobian of the discrete step at ``base`` applied to ``dx``."""
        base = self._check(base, "base")
        dx = self._check(dx, "perturbation")
        if self.kind == "linear_advection":
            return self._advect(dx)
        if self.kind == "linear":
            return self.matrix @ dx
        h = self.dt
        x2, x3, x4 = self._stages(base)
        d1 = self._rhs_tl(base, dx)
        d2 = self._rhs_tl(x2, dx + 0.5 * h * d1)
        d3 = self._rhs_tl(x3, dx + 0.5 * h * d2)
        d4 = self._rhs_tl(x4, dx + h * d3)
        out = dx + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        if not np.all(np.isfinite(out)):
            raise NonFiniteState("tangent-linear step produced non-finite values", index=i)
        return out

    def adjoint(self, base, lam, i: int = 0) -> np.ndarray:
        """Transpose of ``tangent_linear`` at the same base state."""
        base = self._check(base, "base")
        lam = self._check(lam, "adjoint variable")
        if self.kind == "linear_advection":
            return self._advect_T(lam)
        if self.kind == "linear":
            return self.matrix.T @ lam
        h = self.dt
        x2, x3, x4 = self._stages(base)
        u4 = self._rhs_ad(x4, (h / 6.0) * lam)
        u3 = self._rhs_ad(x3, (h / 3.0) * lam + h * u4)
        u2 = self._rhs_ad(x2, (h / 3.0) * lam + 0.5 * h * u3)
        u1 = self._rhs_ad(base, (h / 6.0) * lam + 0.5 * h * u2)
        out = lam + u1 + u2 + u3 + u4
        if not np.all(np.isfinite(out)):
            raise NonFiniteState("adjoint step produced non-finite values", index=i)
        return out

    def jacobian(self, base, i: int = 0) -> np.ndarray:
        """Dense Jacobian of the step, assembled column by column from the TLM."""
        if self.kind == "linear":
            return np.array(self.matrix)
        eye = np.eye(self.n)
        return np.column_stack([self.tangent_linear(base, eye[:, j], i) for j in range(self.n)])

    def propagate(self, x0, N: int, start: int = 0) -> np.ndarray:
        """Trajectory of ``N + 1`` states (rows), beginning with ``x0``."""
        if N < 0:
            raise ValueError("N must be non-negative")
        x0 = self._check(x0)
        traj = np.empty((N + 1,) + x0.shape)
        traj[0] = x0
        for k in range(N):
            traj[k + 1] = self.step(traj[k], start + k)
        return traj


def lorenz63(dt: float = 0.01, sigma: float = 10.0, rho: float = 28.0,
             beta: float = 8.0 / 3.0) -> Model:
    return Model("lorenz63", 3, dt, sigma=sigma, rho=rho, beta=beta)


def lorenz96(n: int = 40, dt: float = 0.05, forcing: float = 8.0) -> Model:
    return Model("lorenz96", n, dt, forcing=forcing)


def linear_advection(n: int, speed: float = 1.0, dt: float = 1.0) -> Model:
    """Periodic advection on a unit-spaced grid.

    Each step shifts the field by ``speed * dt`` cells. Integer shifts are
    exact permutations; fractional shifts interpolate linearly between the
    two neighbouring cells, which keeps the operator circulant and
    conservative.
    """
    return Model("linear_advection", n, dt, speed=speed)


def linear_model(matrix, dt: float = 1.0) -> Model:
    """Generic linear model ``x_{i+1} = A x_i`` for a fixed matrix."""
    m = np.array(matrix, dtype=float, ndmin=2)
    return Model("linear", m.shape[0], dt, matrix=m)


def step(model: Model, x, i: int = 0):
    return model.step(x, i)


def tangent_linear(model: Model, base, dx, i: int = 0):
    return model.tangent_linear(base, dx, i)


def adjoint(model: Model, base, lam, i: int = 0):
    return model.adjoint(base, lam, i)


def propagate(model: Model, x0, N: int):
    return model.propagate(x0, N)
