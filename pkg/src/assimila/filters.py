"""Sequential filters: KF, EKF, SEEK, RRSQRT, stochastic EnKF and ETKF.

Every ``*_cycle`` function takes a forecast at time ``i``, performs the
analysis with ``y_i`` and returns ``(analysis, forecast_at_i_plus_1)``.
Ensembles are ``(r, n)`` arrays, one member per row.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .covariance import Covariance, DenseCovariance, as_covariance
from .errors import (
    DimensionMismatch,
    NotPositiveDefinite,
    RankExhausted,
    SingularEnsembleGram,
    SingularInnovationCovariance,
)
from .linalg import LinearOperator, conjugate_gradient, sym_inv_sqrt, sym_sqrt, truncated_sym_eig
from .models import Model, linear_model
from .observations import ObservationBatch, ObservationOperator

JOSEPH_TOL = 1e-8


def _sym(P):
    return 0.5 * (P + P.T)


@dataclass
class FilterState:
    """Mean plus either a dense covariance ``cov`` or a factor ``S`` with ``P = S S^T``."""

    mean: np.ndarray
    cov: Optional[np.ndarray] = None
    factor: Optional[np.ndarray] = None
    phase: str = "forecast"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        n = self.mean.shape[0]
        if self.cov is not None:
            self.cov = np.array(self.cov, dtype=float, ndmin=2)
            if self.cov.shape != (n, n):
                raise DimensionMismatch(f"covariance shape {self.cov.shape} does not match n={n}")
        if self.factor is not None:
            self.factor = np.array(self.factor, dtype=float, ndmin=2).reshape(n, -1)
        if self.phase not in ("forecast", "analysis"):
            raise ValueError("phase must be 'forecast' or 'analysis'")

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        if self.cov is not None:
            return self.cov
        if self.factor is not None:
            return self.factor @ self.factor.T
        raise ValueError("state carries no covariance")

    @property
    def rank(self) -> int:
        return self.factor.shape[1] if self.factor is not None else self.n


@dataclass
class GainReport:
    """Gain, innovation and increment of one analysis; ``increment = gain @ innovation``."""

    gain: np.ndarray
    innovation: np.ndarray
    increment: np.ndarray
    joseph_gap: float = 0.0
    pinv_fallback: bool = False


def _as_opH(H, n) -> ObservationOperator:
    if isinstance(H, ObservationOperator):
        if H.n != n:
            raise DimensionMismatch("observation operator does not match the state dimension")
        return H
    op = ObservationOperator.linear(H)
    if op.n != n:
        raise DimensionMismatch("observation matrix does not match the state dimension")
    return op


def _as_model(M, n) -> Model:
    if isinstance(M, Model):
        if M.n != n:
            raise DimensionMismatch("model does not match the state dimension")
        return M
    m = linear_model(M)
    if m.n != n:
        raise DimensionMismatch("model matrix does not match the state dimension")
    return m


def _dense_Q(Q, n):
    if Q is None:
        return None
    return as_covariance(Q, n).to_dense()


def _innovation_factor(S):
    try:
        return cho_factor(_sym(S), lower=True)
    except np.linalg.LinAlgError:
        raise SingularInnovationCovariance("innovation covariance H P H^T + R is not invertible") from None


# --------------------------------------------------------------------------
# Kalman and extended Kalman filters


def kf_forecast(state: FilterState, M, Q=None) -> FilterState:
    """``x^F = M(x^A)``, ``P^F = M P^A M^T + Q`` with ``M`` the Jacobian at ``x^A``."""
    model = _as_model(M, state.n)
    Mj = model.jacobian(state.mean)
    P = Mj @ state.covariance @ Mj.T
    Qd = _dense_Q(Q, state.n)
    if Qd is not None:
        P = P + Qd
    return FilterState(model.step(state.mean), cov=_sym(P), phase="forecast")


def kf_analysis(state: FilterState, H, R, y):
    """Kalman analysis with ``P^A = (I - KH) P^F``, cross-checked against the Joseph form."""
    opH = _as_opH(H, state.n)
    R = as_covariance(R, opH.p)
    Hj = opH.jacobian(state.mean)
    P = state.covariance
    d = np.asarray(y, dtype=float) - opH(state.mean)
    Rd = R.to_dense()
    cf = _innovation_factor(Hj @ P @ Hj.T + Rd)
    K = cho_solve(cf, Hj @ P).T
    inc = K @ d
    IKH = np.eye(state.n) - K @ Hj
    PA = _sym(IKH @ P)
    joseph = _sym(IKH @ P @ IKH.T + K @ Rd @ K.T)
    scale = max(float(np.max(np.abs(PA))), np.finfo(float).tiny)
    gap = float(np.max(np.abs(joseph - PA))) / scale
    if gap > JOSEPH_TOL:
        warnings.warn(f"Joseph-form covariance differs by {gap:.2e} (relative)", RuntimeWarning,
                      stacklevel=2)
    out = FilterState(state.mean + inc, cov=PA, phase="analysis")
    return out, GainReport(K, d, inc, gap)


def ekf_cycle(state: FilterState, model, opH, R, Q, y):
    """One EKF cycle: analysis linearized at ``x^F``, then forecast linearized at ``x^A``.

    ``y=None`` skips the analysis. Returns ``(analysis, forecast, report)``.
    """
    report = None
    if y is None:
        analysis = replace(state, phase="analysis")
    else:
        analysis, report = kf_analysis(state, opH, R, y)
    return analysis, kf_forecast(analysis, model, Q), report


def variational_analysis(state: FilterState, opH, R, y, tol: float = 1e-12, max_iter=None):
    """Analysis as the minimizer of ``1/2||y - Hx||^2_{R^-1} + 1/2||x - x^F||^2_{(P^F)^-1}``.

    Solved by CG on the Hessian ``H^T R^{-1} H + (P^F)^{-1}``. The returned
    covariance is the dense inverse Hessian. Returns ``(state, cg_result)``.
    """
    opH = _as_opH(opH, state.n)
    R = as_covariance(R, opH.p)
    PF = DenseCovariance(state.covariance)
    Hj = opH.jacobian(state.mean)

    def mv(v):
        return Hj.T @ R.apply_inverse(Hj @ v) + PF.apply_inverse(v)

    d = np.asarray(y, dtype=float) - opH(state.mean)
    res = conjugate_gradient(LinearOperator(state.n, state.n, mv, symmetric=True),
                             Hj.T @ R.apply_inverse(d), tol=tol, max_iter=max_iter, ritz=False)
    Hess = np.column_stack([mv(e) for e in np.eye(state.n)])
    PA = _sym(np.linalg.inv(_sym(Hess)))
    return FilterState(state.mean + res.x, cov=PA, phase="analysis"), res


# --------------------------------------------------------------------------
# reduced-rank square-root filters


def _obs_factor(opH: ObservationOperator, x, S):
    Hj = opH.jacobian(x)
    return Hj @ S


def seek_analysis(state: FilterState, opH, R, y):
    """SEEK analysis; every inverse and square root lives in rank space."""
    S = state.factor
    if S is None or S.shape[1] < 1:
        raise RankExhausted("SEEK needs a factor of rank >= 1")
    opH = _as_opH(opH, state.n)
    R = as_covariance(R, opH.p)
    L = _obs_factor(opH, state.mean, S)
    RinvL = R.apply_inverse(L.T).T
    G = _sym(np.eye(S.shape[1]) + L.T @ RinvL)
    try:
        cG = cho_factor(G, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("rank-space matrix I + L^T R^-1 L is not positive definite") from None
    K = S @ cho_solve(cG, RinvL.T)
    d = np.asarray(y, dtype=float) - opH(state.mean)
    inc = K @ d
    SA = S @ sym_inv_sqrt(G)
    return FilterState(state.mean + inc, factor=SA, phase="analysis"), GainReport(K, d, inc)


def _retruncate(P, r):
    pairs = truncated_sym_eig(_sym(P), r)
    return pairs.vectors * np.sqrt(np.clip(pairs.values, 0.0, None))


def seek_forecast(state: FilterState, model, Q=None) -> FilterState:
    """Mean through the model; factor columns by finite differences ``M(x + s_l) - M(x)``.

    With ``Q`` the dense ``S S^T + Q`` is re-truncated to the current rank.
    """
    model = _as_model(model, state.n)
    xf = model.step(state.mean)
    S = state.factor
    St = (model.step(state.mean + S.T) - xf).T
    Qd = _dense_Q(Q, state.n)
    if Qd is not None:
        St = _retruncate(St @ St.T + Qd, S.shape[1])
    return FilterState(xf, factor=St, phase="forecast")


def seek_cycle(state: FilterState, model, opH, R, y, Q=None):
    report = None
    if y is None:
        analysis = replace(state, phase="analysis")
    else:
        analysis, report = seek_analysis(state, opH, R, y)
    return analysis, seek_forecast(analysis, model, Q), report


def rrsqrt_analysis(state: FilterState, opH, R, y):
    S = state.factor
    if S is None or S.shape[1] < 1:
        raise RankExhausted("RRSQRT needs a factor of rank >= 1")
    opH = _as_opH(opH, state.n)
    R = as_covariance(R, opH.p)
    L = _obs_factor(opH, state.mean, S)
    cf = _innovation_factor(L @ L.T + R.to_dense())
    SinvL = cho_solve(cf, L)
    K = S @ SinvL.T
    d = np.asarray(y, dtype=float) - opH(state.mean)
    inc = K @ d
    SA = S @ sym_sqrt(_sym(np.eye(S.shape[1]) - L.T @ SinvL))
    return FilterState(state.mean + inc, factor=SA, phase="analysis"), GainReport(K, d, inc)


def rrsqrt_truncate(S, keep: int) -> np.ndarray:
    """``S V~`` with ``V~`` the top ``keep`` eigenvectors of ``S^T S``."""
    if keep < 1:
        raise RankExhausted("no eigenmodes left to keep")
    pairs = truncated_sym_eig(_sym(S.T @ S), min(keep, S.shape[1]))
    return S @ pairs.vectors


def rrsqrt_forecast(state: FilterState, model, T=None) -> FilterState:
    """Keep ``r - s`` modes, propagate them with the tangent-linear model and append ``T``."""
    model = _as_model(model, state.n)
    S = state.factor
    r = S.shape[1]
    T = np.zeros((state.n, 0)) if T is None else np.array(T, dtype=float, ndmin=2).reshape(state.n, -1)
    s = T.shape[1]
    if r - s < 1:
        raise RankExhausted(f"rank r={r} leaves no room for s={s} model-error columns")
    St = rrsqrt_truncate(S, r - s)
    MS = np.column_stack([model.tangent_linear(state.mean, St[:, j]) for j in range(St.shape[1])])
    return FilterState(model.step(state.mean), factor=np.hstack([MS, T]), phase="forecast")


def rrsqrt_cycle(state: FilterState, model, opH, R, T, y):
    report = None
    if y is None:
        analysis = replace(state, phase="analysis")
    else:
        analysis, report = rrsqrt_analysis(state, opH, R, y)
    return analysis, rrsqrt_forecast(analysis, model, T), report


# --------------------------------------------------------------------------
# ensemble filters


def _check_ensemble(ens):
    E = np.asarray(ens, dtype=float)
    if E.ndim != 2 or E.shape[0] < 2:
        raise DimensionMismatch("an ensemble is an (r, n) array with r >= 2")
    if not np.all(np.isfinite(E)):
        raise ValueError("ensemble members must be finite")
    return E


def anomalies(ens) -> np.ndarray:
    """Normalized anomaly matrix ``X`` (n, r) with ``P = X X^T``."""
    E = _check_ensemble(ens)
    return (E - E.mean(axis=0)).T / np.sqrt(E.shape[0] - 1)


def ensemble_spread(ens) -> float:
    """``sqrt(trace(X X^T) / n)`` for the normalized anomalies ``X``."""
    X = anomalies(ens)
    return float(np.sqrt(np.sum(X * X) / X.shape[0]))


def ensemble_forecast(ens, model: Model) -> np.ndarray:
    """Propagate every member (rows are independent)."""
    return model.step(_check_ensemble(ens))


def enkf_analysis(ens, opH, R, y, rng=None, strict: bool = False):
    """Stochastic EnKF analysis with perturbed observations.

    All ``r`` observation perturbations are drawn up front from ``rng``
    (row ``k`` for member ``k``). A numerically singular Gram matrix
    ``L L^T`` falls back to a pseudo-inverse (flagged in the report) unless
    ``strict`` is set, in which case SingularEnsembleGram is raised. The
    report's innovation is the mean perturbed innovation, so
    ``increment = gain @ innovation`` for the ensemble mean.
    """
    E = _check_ensemble(ens)
    r, n = E.shape
    opH = _as_opH(opH, n)
    R = as_covariance(R, opH.p)
    y = np.asarray(y, dtype=float)
    v = R.sample(np.random.default_rng(rng), size=r)
    HE = opH(E)
    c = np.sqrt(r - 1)
    X = (E - E.mean(axis=0)).T / c
    L = (HE - HE.mean(axis=0) - (v - v.mean(axis=0))).T / c
    G = L @ L.T
    fallback = False
    try:
        cG = cho_factor(_sym(G), lower=True)
        sv = np.linalg.svd(G, compute_uv=False)
        if sv[-1] <= 1e-12 * sv[0]:
            raise np.linalg.LinAlgError
        K = cho_solve(cG, L @ X.T).T
    except np.linalg.LinAlgError:
        if strict:
            raise SingularEnsembleGram("ensemble Gram matrix L L^T is singular") from None
        fallback = True
        K = X @ L.T @ np.linalg.pinv(G, rcond=1e-12, hermitian=True)
    D = (y + v) - HE
    EA = E + D @ K.T
    d_mean = D.mean(axis=0)
    return EA, GainReport(K, d_mean, K @ d_mean, pinv_fallback=fallback)


def enkf_cycle(ens, model, opH, R, y, rng=None, strict: bool = False):
    report = None
    if y is None:
        EA = _check_ensemble(ens).copy()
    else:
        EA, report = enkf_analysis(ens, opH, R, y, rng, strict)
    return EA, ensemble_forecast(EA, _as_model(model, EA.shape[1])), report


def random_orthogonal_preserving_ones(r: int, seed=None) -> np.ndarray:
    """Random orthogonal ``V`` (r, r) with ``V 1 = 1``."""
    rng = np.random.default_rng(seed)
    A = np.column_stack([np.ones(r), rng.standard_normal((r, r - 1))])
    Q, _ = np.linalg.qr(A)
    Z, Rz = np.linalg.qr(rng.standard_normal((r - 1, r - 1)))
    Z = Z * np.sign(np.diag(Rz))
    core = np.eye(r)
    core[1:, 1:] = Z
    return Q @ core @ Q.T


def etkf_analysis(ens, opH, R, y, V=None):
    """ETKF analysis; all inverses and square roots are r x r.

    ``V`` must be orthogonal with ``V 1 = 1``; identity by default.
    """
    E = _check_ensemble(ens)
    r, n = E.shape
    opH = _as_opH(opH, n)
    R = as_covariance(R, opH.p)
    y = np.asarray(y, dtype=float)
    c = np.sqrt(r - 1)
    xbar = E.mean(axis=0)
    X = (E - xbar).T / c
    Y = opH(E)
    ybar = Y.mean(axis=0)
    Lt = R.sqrt_inverse_apply(Y - ybar).T / c          # (p, r)
    d = R.sqrt_inverse_apply(y - ybar)
    A = _sym(np.eye(r) + Lt.T @ Lt)
    W_half = sym_inv_sqrt(A)
    W = W_half @ W_half
    w = W @ (Lt.T @ d)
    if V is None:
        V = np.eye(r)
    elif np.max(np.abs(V @ np.ones(r) - 1.0)) > 1e-10:
        raise ValueError("V must satisfy V 1 = 1")
    T = w[:, None] + c * (W_half @ V)                   # (r, r)
    EA = xbar + (X @ T).T
    inc = X @ w
    # state-space gain X W L~^T R^{-1/2} = X W (Y - ybar) R^{-1} / sqrt(r-1)
    K = X @ W @ R.apply_inverse(Y - ybar) / c
    return EA, GainReport(K, y - ybar, inc)


def etkf_cycle(ens, model, opH, R, y, V=None):
    report = None
    if y is None:
        EA = _check_ensemble(ens).copy()
    else:
        EA, report = etkf_analysis(ens, opH, R, y, V)
    return EA, ensemble_forecast(EA, _as_model(model, EA.shape[1])), report


# --------------------------------------------------------------------------
# cycling driver


FILTER_METHODS = ("kf", "ekf", "seek", "rrsqrt", "enkf", "etkf")


@dataclass
class FilterRun:
    """Per-time records of one filter run over times ``0..N``."""

    forecast_means: np.ndarray
    analysis_means: np.ndarray
    forecast_spread: np.ndarray
    analysis_spread: np.ndarray
    analysis_times: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    final: object = None
    pinv_fallbacks: int = 0


def _spread(method, obj):
    if method in ("enkf", "etkf"):
        return ensemble_spread(obj)
    return float(np.sqrt(np.trace(obj.covariance) / obj.n))


def _mean(method, obj):
    return obj.mean(axis=0) if method in ("enkf", "etkf") else obj.mean


def run_filter(method: str, initial, model: Model, opH, obs: ObservationBatch, N: int,
               Q=None, T=None, seed=None, V=None, strict: bool = False) -> FilterRun:
    """Cycle forecast and analysis over ``0..N`` starting from the forecast ``initial``.

    ``initial`` is a FilterState (kf, ekf, seek, rrsqrt) or an ``(r, n)``
    ensemble (enkf, etkf). Times without observations skip the analysis;
    the analysis record there equals the forecast. EnKF noise comes from a
    single generator seeded with ``seed``.
    """
    if method not in FILTER_METHODS:
        raise ValueError(f"unknown filter method {method!r}")
    rng = np.random.default_rng(seed)
    obs = obs if obs is not None else ObservationBatch.empty()
    n = model.n
    fm = np.empty((N + 1, n))
    am = np.empty((N + 1, n))
    fs = np.empty(N + 1)
    as_ = np.empty(N + 1)
    run = FilterRun(fm, am, fs, as_)
    cur = initial if method not in ("enkf", "etkf") else _check_ensemble(initial)
    for i in range(N + 1):
        fm[i], fs[i] = _mean(method, cur), _spread(method, cur)
        got = obs.at(i)
        report = None
        if got is None:
            ana = cur if method in ("enkf", "etkf") else replace(cur, phase="analysis")
        else:
            y, R = got
            if method in ("kf", "ekf"):
                ana, report = kf_analysis(cur, opH, R, y)
            elif method == "seek":
                ana, report = seek_analysis(cur, opH, R, y)
            elif method == "rrsqrt":
                ana, report = rrsqrt_analysis(cur, opH, R, y)
            elif method == "enkf":
                ana, report = enkf_analysis(cur, opH, R, y, rng, strict)
                run.pinv_fallbacks += int(report.pinv_fallback)
            else:
                ana, report = etkf_analysis(cur, opH, R, y, V)
            run.analysis_times.append(i)
            run.gains.append(report)
        am[i], as_[i] = _mean(method, ana), _spread(method, ana)
        if i == N:
            run.final = ana
            break
        if method in ("kf", "ekf"):
            cur = kf_forecast(ana, model, Q)
        elif method == "seek":
            cur = seek_forecast(ana, model, Q)
        elif method == "rrsqrt":
            cur = rrsqrt_forecast(ana, model, T)
        else:
            cur = ensemble_forecast(ana, model)
    return run
