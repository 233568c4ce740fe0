"""Observation operators, observation batches and synthetic observations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .covariance import Covariance, DenseCovariance, DiagonalCovariance, as_covariance
from .errors import DimensionMismatch


@dataclass(frozen=True)
class ObservationOperator:
    """Linear observation operator of kind identity, subsample or linear.

    The ``base`` argument on the linearized actions is accepted (and
    ignored by the linear kinds) so nonlinear operators can be added
    without changing call sites.
    """

    kind: str
    n: int
    indices: Optional[tuple] = None
    matrix: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind == "identity":
            pass
        elif self.kind == "subsample":
            idx = tuple(int(i) for i in (self.indices or ()))
            if not idx:
                raise DimensionMismatch("subsample needs at least one index")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError("subsample indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.n:
                raise DimensionMismatch(f"subsample indices must lie in [0, {self.n})")
            object.__setattr__(self, "indices", idx)
        elif self.kind == "linear":
            H = np.array(self.matrix, dtype=float, ndmin=2)
            if H.shape[1] != self.n:
                raise DimensionMismatch(f"matrix has {H.shape[1]} columns, state dimension is {self.n}")
            H.setflags(write=False)
            object.__setattr__(self, "matrix", H)
        else:
            raise ValueError(f"unknown observation operator kind {self.kind!r}")

    @classmethod
    def identity(cls, n: int) -> "ObservationOperator":
        return cls("identity", n)

    @classmethod
    def subsample(cls, n: int, indices: Sequence[int]) -> "ObservationOperator":
        return cls("subsample", n, indices=tuple(indices))

    @classmethod
    def linear(cls, matrix) -> "ObservationOperator":
        H = np.array(matrix, dtype=float, ndmin=2)
        return cls("linear", H.shape[1], matrix=H)

    @property
    def p(self) -> int:
        if self.kind == "identity":
            return self.n
        if self.kind == "subsample":
            return len(self.indices)
        return self.matrix.shape[0]

    def _x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.n,):
            raise DimensionMismatch(f"state has shape {x.shape}, operator expects n={self.n}")
        return x

    def __call__(self, x) -> np.ndarray:
        x = self._x(x)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "subsample":
            return x[..., list(self.indices)]
        return x @ self.matrix.T

    observe = __call__

    def tangent_linear(self, base, dx) -> np.ndarray:
        return self(dx)

    def adjoint(self, base, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if r.shape != (self.p,):
            raise DimensionMismatch(f"residual has shape {r.shape}, operator has p={self.p}")
        if self.kind == "identity":
            return r.copy()
        if self.kind == "subsample":
            out = np.zeros(self.n)
            out[list(self.indices)] = r
            return out
        return self.matrix.T @ r

    def jacobian(self, base=None) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(self.n)
        if self.kind == "subsample":
            return np.eye(self.n)[list(self.indices)]
        return np.array(self.matrix)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "subsample":
            out["indices"] = list(self.indices)
        if self.kind == "linear":
            out["matrix"] = self.matrix.tolist()
        return out

    @classmethod
    def from_json(cls, data: dict, n: int) -> "ObservationOperator":
        kind = data["kind"]
        if kind == "identity":
            return cls.identity(n)
        if kind == "subsample":
            if "indices" in data:
                return cls.subsample(n, data["indices"])
            stride = int(data.get("stride", 1))
            offset = int(data.get("offset", 0))
            return cls.subsample(n, range(offset, n, stride))
        if kind == "linear":
            op = cls.linear(data["matrix"])
            if op.n != n:
                raise DimensionMismatch(f"observation matrix has {op.n} columns, state dimension is {n}")
            return op
        raise ValueError(f"unknown observation operator kind {kind!r}")


def observe(opH: ObservationOperator, x):
    return opH(x)


def observe_adjoint(opH: ObservationOperator, base, r):
    return opH.adjoint(base, r)


@dataclass
class ObservationBatch:
    """Observations ``y_i`` at strictly increasing time indices.

    ``R`` is either one covariance shared by every time or a sequence with
    one entry per observation time.
    """

    times: list
    values: np.ndarray
    R: object

    def __post_init__(self):
        self.times = [int(t) for t in self.times]
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("observation times must be strictly increasing")
        vals = np.asarray(self.values, dtype=float)
        if vals.size == 0:
            vals = vals.reshape(len(self.times), -1) if self.times else np.zeros((0, 0))
        if vals.ndim != 2 or vals.shape[0] != len(self.times):
            raise DimensionMismatch("values must have one row per observation time")
        if not np.all(np.isfinite(vals)):
            raise ValueError("observation values must be finite")
        self.values = vals
        p = vals.shape[1] if vals.size else None
        if isinstance(self.R, (list, tuple)):
            if len(self.R) != len(self.times):
                raise DimensionMismatch("need one R per observation time")
            self.R = [as_covariance(r, p) for r in self.R]
        elif self.R is not None and p is not None:
            self.R = as_covariance(self.R, p)

    @property
    def p(self) -> int:
        return self.values.shape[1] if self.values.size else 0

    def __len__(self):
        return len(self.times)

    def __contains__(self, t):
        return int(t) in self._index

    @property
    def _index(self):
        return {t: k for k, t in enumerate(self.times)}

    def at(self, t):
        """``(y, R)`` at time ``t``, or ``None`` when nothing is observed."""
        k = self._index.get(int(t))
        if k is None:
            return None
        R = self.R[k] if isinstance(self.R, list) else self.R
        return self.values[k], R

    def covariance(self, k: int) -> Covariance:
        return self.R[k] if isinstance(self.R, list) else self.R

    @classmethod
    def empty(cls) -> "ObservationBatch":
        return cls([], np.zeros((0, 0)), None)

    def to_json(self) -> dict:
        def cov_json(C):
            if isinstance(C, DiagonalCovariance):
                return {"kind": "diagonal", "variances": C.variances.tolist()}
            return {"kind": "dense", "matrix": C.to_dense().tolist()}

        R = None
        if isinstance(self.R, list):
            R = [cov_json(C) for C in self.R]
        elif self.R is not None:
            R = cov_json(self.R)
        return {"times": list(self.times), "values": self.values.tolist(), "R": R}

    @classmethod
    def from_json(cls, data: dict) -> "ObservationBatch":
        def cov(d):
            if d["kind"] == "diagonal":
                return DiagonalCovariance(d["variances"])
            return DenseCovariance(d["matrix"])

        R = data.get("R")
        if isinstance(R, list):
            R = [cov(d) for d in R]
        elif R is not None:
            R = cov(R)
        values = np.asarray(data["values"], dtype=float)
        if not data["times"]:
            return cls.empty()
        return cls(data["times"], values, R)


def synthesize_observations(truth, opH: ObservationOperator, R: Covariance,
                            obs_times: Sequence[int], seed=None) -> ObservationBatch:
    """``y_i = H(x_i^truth) + v_i`` with ``v_i ~ N(0, R)`` drawn in time order."""
    truth = np.asarray(truth, dtype=float)
    if truth.ndim != 2 or truth.shape[1] != opH.n:
        raise DimensionMismatch("truth must be an (N+1, n) trajectory matching the operator")
    R = as_covariance(R, opH.p)
    times = [int(t) for t in obs_times]
    if any(t < 0 or t >= truth.shape[0] for t in times):
        raise DimensionMismatch("observation times must index the truth trajectory")
    rng = np.random.default_rng(seed)
    if not times:
        return ObservationBatch.empty()
    noise = R.sample(rng, size=len(times))
    values = np.array([opH(truth[t]) for t in times]) + noise
    return ObservationBatch(times, values, R)
