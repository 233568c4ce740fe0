import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from assimila.covariance import DenseCovariance, DiagonalCovariance
from assimila.errors import DimensionMismatch, RankExhausted, SingularEnsembleGram
from assimila.filters import (
    FilterState,
    anomalies,
    ekf_cycle,
    enkf_analysis,
    ensemble_spread,
    etkf_analysis,
    kf_analysis,
    kf_forecast,
    random_orthogonal_preserving_ones,
    rrsqrt_analysis,
    rrsqrt_forecast,
    rrsqrt_truncate,
    run_filter,
    seek_analysis,
    seek_forecast,
    variational_analysis,
)
from assimila.models import linear_advection, linear_model, lorenz63, lorenz96
from assimila.observations import ObservationBatch, ObservationOperator
from oracles import kf_analysis as kf_ref
from oracles import kf_forecast as kf_fc_ref
from oracles import random_spd


def gaussian_setup(rng, n=6, p=3):
    P = random_spd(rng, n)
    H = rng.standard_normal((p, n))
    R = random_spd(rng, p, shift=0.5)
    return P, H, R, rng.standard_normal(n), rng.standard_normal(p)


def spanning_ensemble(rng, x, P, r):
    """(r, n) members whose normalized anomalies reproduce P exactly."""
    n = x.size
    Z = rng.standard_normal((r, n))
    Z -= Z.mean(axis=0)
    C = Z.T @ Z / (r - 1)
    Z = Z @ np.linalg.inv(np.linalg.cholesky(C)).T
    return x + Z @ np.linalg.cholesky(P).T


# ---------------------------------------------------------------- KF


def test_kf_forecast_examples(rng):
    s = FilterState(np.ones(2), cov=np.eye(2))
    f = kf_forecast(s, np.eye(2))
    np.testing.assert_array_equal(f.mean, s.mean)
    np.testing.assert_array_equal(f.cov, s.cov)
    f = kf_forecast(FilterState([1.0], cov=[[1.0]]), [[2.0]], DiagonalCovariance([3.0]))
    assert f.cov[0, 0] == 7.0 and f.mean[0] == 2.0
    M = rng.standard_normal((6, 6))
    P = random_spd(rng, 6)
    Q = random_spd(rng, 6)
    f = kf_forecast(FilterState(np.zeros(6), cov=P), M, DenseCovariance(Q))
    np.testing.assert_allclose(f.cov, M @ P @ M.T + Q, rtol=1e-12)
    assert np.max(np.abs(f.cov - f.cov.T)) <= 1e-12


def test_kf_analysis_examples(rng):
    a, rep = kf_analysis(FilterState([0.0], cov=[[1.0]]), [[1.0]], DiagonalCovariance([1.0]), [2.0])
    assert rep.gain[0, 0] == pytest.approx(0.5)
    assert a.mean[0] == pytest.approx(1.0) and a.cov[0, 0] == pytest.approx(0.5)
    a, rep = kf_analysis(FilterState(np.ones(3), cov=np.zeros((3, 3))), np.eye(3),
                         DiagonalCovariance(np.ones(3)), rng.standard_normal(3))
    assert np.all(rep.gain == 0)
    np.testing.assert_array_equal(a.mean, np.ones(3))


def test_kf_small_R_inverts_H(rng):
    H = rng.standard_normal((4, 4)) + 3 * np.eye(4)
    y = rng.standard_normal(4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a, _ = kf_analysis(FilterState(np.zeros(4), cov=np.eye(4)), H,
                           DiagonalCovariance(np.full(4, 1e-14)), y)
    np.testing.assert_allclose(a.mean, np.linalg.solve(H, y), atol=1e-6)


def test_kf_vs_explicit_inverse_and_joseph(rng):
    for _ in range(10):
        P, H, R, x, y = gaussian_setup(rng)
        a, rep = kf_analysis(FilterState(x, cov=P), H, DenseCovariance(R), y)
        xa, Pa, K = kf_ref(x, P, H, R, y)
        np.testing.assert_allclose(a.mean, xa, rtol=1e-9, atol=1e-10)
        np.testing.assert_allclose(a.cov, Pa, rtol=1e-9, atol=1e-10)
        assert rep.joseph_gap <= 1e-8
        np.testing.assert_allclose(rep.increment, rep.gain @ rep.innovation, atol=1e-12)


def test_smw_gain_identity(rng):
    for _ in range(10):
        n, p = rng.integers(2, 21), rng.integers(1, 9)
        P, H, R, _, _ = gaussian_setup(rng, n, p)
        K1 = P @ H.T @ np.linalg.inv(H @ P @ H.T + R)
        Ri = np.linalg.inv(R)
        K2 = np.linalg.solve(np.linalg.inv(P) + H.T @ Ri @ H, H.T @ Ri)
        assert np.max(np.abs(K1 - K2)) <= 1e-8 * np.max(np.abs(K1))


def test_kf_cycles_stay_symmetric_psd():
    rng = np.random.default_rng(1)
    n = 20
    m = linear_advection(n, speed=0.7)
    H = ObservationOperator.subsample(n, range(0, n, 3))
    R = DiagonalCovariance(np.full(H.p, 0.1))
    s = FilterState(np.zeros(n), cov=random_spd(rng, n))
    for _ in range(30):
        s, _ = kf_analysis(s, H, R, rng.standard_normal(H.p))
        P = s.cov
        assert np.max(np.abs(P - P.T)) <= 1e-12
        assert np.linalg.eigvalsh(P).min() >= -1e-10 * np.trace(P) / n
        s = kf_forecast(s, m, DiagonalCovariance(np.full(n, 0.01)))


# ---------------------------------------------------------------- EKF


def test_ekf_linear_matches_kf(rng):
    M = rng.standard_normal((4, 4)) * 0.5
    P, H, R, x, y = gaussian_setup(rng, 4, 2)
    Q = random_spd(rng, 4)
    a, f, _ = ekf_cycle(FilterState(x, cov=P), linear_model(M), ObservationOperator.linear(H),
                        DenseCovariance(R), DenseCovariance(Q), y)
    xa, Pa, _ = kf_ref(x, P, H, R, y)
    xf, Pf = kf_fc_ref(xa, Pa, M, Q)
    np.testing.assert_allclose(f.mean, xf, atol=1e-12)
    np.testing.assert_allclose(f.cov, Pf, atol=1e-11)


def test_ekf_lorenz63_vs_dense_jacobian(rng):
    m = lorenz63()
    opH = ObservationOperator.subsample(3, [0, 2])
    R = DiagonalCovariance([0.5, 0.5])
    x = np.array([1.0, 2.0, 20.0])
    P = random_spd(rng, 3)
    y = rng.standard_normal(2)
    a, f, _ = ekf_cycle(FilterState(x, cov=P), m, opH, R, None, y)
    H = opH.jacobian()
    xa, Pa, _ = kf_ref(x, P, H, R.to_dense(), y)
    Mj = m.jacobian(xa)
    np.testing.assert_allclose(f.mean, m.step(xa), atol=1e-12)
    np.testing.assert_allclose(f.cov, Mj @ Pa @ Mj.T, rtol=1e-10, atol=1e-12)


def test_ekf_zero_innovation(rng):
    x = np.array([1.0, 2.0, 20.0])
    P = random_spd(rng, 3)
    opH = ObservationOperator.identity(3)
    a, _, rep = ekf_cycle(FilterState(x, cov=P), lorenz63(), opH, DiagonalCovariance(np.ones(3)), None, x)
    np.testing.assert_array_equal(a.mean, x)
    assert np.trace(a.cov) < np.trace(P)


# ---------------------------------------------------------------- variational analysis


def test_variational_analysis(rng):
    a, _ = variational_analysis(FilterState([0.0], cov=[[1.0]]), [[1.0]], DiagonalCovariance([1.0]), [2.0])
    assert a.mean[0] == pytest.approx(1.0)
    P, H, R, x, y = gaussian_setup(rng, 8, 3)
    a, res = variational_analysis(FilterState(x, cov=P), H, DenseCovariance(R), y)
    xa, Pa, _ = kf_ref(x, P, H, R, y)
    np.testing.assert_allclose(a.mean, xa, atol=1e-8)
    np.testing.assert_allclose(a.cov, Pa, atol=1e-8)


# ---------------------------------------------------------------- SEEK and RRSQRT


@pytest.mark.parametrize("which", ["seek", "rrsqrt"])
def test_full_rank_factor_filters_match_kf(which, rng):
    n = 5
    M = np.eye(n) + 0.3 * rng.standard_normal((n, n))
    P, H, R, x, y = gaussian_setup(rng, n, 2)
    S = np.linalg.cholesky(P)
    state = FilterState(x, factor=S)
    if which == "seek":
        a, rep = seek_analysis(state, H, DenseCovariance(R), y)
        f = seek_forecast(a, linear_model(M))
    else:
        a, rep = rrsqrt_analysis(state, H, DenseCovariance(R), y)
        f = rrsqrt_forecast(a, linear_model(M))
    xa, Pa, K = kf_ref(x, P, H, R, y)
    np.testing.assert_allclose(a.mean, xa, atol=1e-8)
    np.testing.assert_allclose(a.covariance, Pa, atol=1e-8)
    np.testing.assert_allclose(rep.gain, K, atol=1e-8)
    xf, Pf = kf_fc_ref(xa, Pa, M)
    np.testing.assert_allclose(f.mean, xf, atol=1e-8)
    np.testing.assert_allclose(f.covariance, Pf, atol=1e-8)


@pytest.mark.parametrize("fn", [seek_analysis, rrsqrt_analysis])
def test_factor_zero_innovation(fn, rng):
    x = rng.standard_normal(4)
    H = rng.standard_normal((2, 4))
    a, _ = fn(FilterState(x, factor=rng.standard_normal((4, 2))), H, DiagonalCovariance([1.0, 1.0]), H @ x)
    np.testing.assert_allclose(a.mean, x, atol=1e-14)


def test_seek_scalar_by_hand():
    a, rep = seek_analysis(FilterState([0.0], factor=[[1.0]]), [[1.0]], DiagonalCovariance([1.0]), [2.0])
    assert a.mean[0] == pytest.approx(1.0)
    assert a.factor[0, 0] ** 2 == pytest.approx(0.5)


def test_seek_with_Q_keeps_rank(rng):
    S = rng.standard_normal((6, 3))
    f = seek_forecast(FilterState(np.zeros(6), factor=S), linear_model(np.eye(6)), DiagonalCovariance(np.ones(6)))
    assert f.factor.shape == (6, 3)


def test_rrsqrt_lossless_truncation(rng):
    S = np.hstack([rng.standard_normal((6, 3)), np.zeros((6, 2))])
    St = rrsqrt_truncate(S, 3)
    np.testing.assert_allclose(St @ St.T, S @ S.T, atol=1e-10)


def test_rrsqrt_rank_after_forecast(rng):
    n, r, s = 10, 4, 1
    m = linear_advection(n, speed=0.5)
    T = rng.standard_normal((n, s))
    f = rrsqrt_forecast(FilterState(rng.standard_normal(n), factor=rng.standard_normal((n, r))), m, T)
    assert f.factor.shape == (n, r)
    sv = np.linalg.svd(f.factor, compute_uv=False)
    assert np.sum(sv > 1e-10 * sv[0]) == r


def test_rrsqrt_rank_exhausted(rng):
    with pytest.raises(RankExhausted):
        rrsqrt_forecast(FilterState(np.zeros(3), factor=np.ones((3, 1))), linear_model(np.eye(3)), np.ones((3, 1)))


# ---------------------------------------------------------------- ensembles


def test_anomalies_and_spread_examples():
    E = np.array([[0.0, 0.0], [2.0, 2.0]])
    X = anomalies(E)
    np.testing.assert_allclose(X @ X.T, np.full((2, 2), 2.0))
    assert ensemble_spread(np.ones((4, 3))) == 0.0
    with pytest.raises(DimensionMismatch):
        anomalies(np.ones((1, 3)))


def test_enkf_zero_spread_unchanged_up_to_noise():
    E = np.ones((5, 2))
    opH = ObservationOperator.identity(2)
    EA, rep = enkf_analysis(E, opH, DiagonalCovariance([1.0, 1.0]), np.ones(2), rng=3)
    assert np.all(rep.gain == 0)
    np.testing.assert_array_equal(EA, E)


def test_enkf_singular_gram_fallback_and_strict(rng):
    # r - 1 < p makes the p x p Gram matrix rank deficient
    E = rng.standard_normal((3, 5))
    args = (E, ObservationOperator.identity(5), DiagonalCovariance(np.ones(5)), np.zeros(5))
    EA, rep = enkf_analysis(*args, rng=3)
    assert rep.pinv_fallback and np.all(np.isfinite(EA))
    with pytest.raises(SingularEnsembleGram):
        enkf_analysis(*args, rng=3, strict=True)


def test_enkf_deterministic(rng):
    E = rng.standard_normal((20, 3))
    args = (E, ObservationOperator.identity(3), DiagonalCovariance(np.ones(3)), np.zeros(3))
    a, _ = enkf_analysis(*args, rng=7)
    b, _ = enkf_analysis(*args, rng=7)
    np.testing.assert_array_equal(a, b)


def test_enkf_scalar_large_ensemble():
    r = 10 ** 4
    rng = np.random.default_rng(12)
    E = rng.standard_normal((r, 1))
    EA, _ = enkf_analysis(E, ObservationOperator.identity(1), DiagonalCovariance([1.0]), [2.0], rng=rng)
    Pa = 0.5
    assert abs(EA.mean() - 1.0) <= 3 * np.sqrt(Pa / r)
    assert abs(EA.var(ddof=1) - Pa) <= 0.1 * Pa


def test_enkf_report_increment_consistent(rng):
    E = rng.standard_normal((30, 4))
    EA, rep = enkf_analysis(E, ObservationOperator.subsample(4, [1, 3]), DiagonalCovariance([0.5, 0.5]),
                            np.ones(2), rng=1)
    np.testing.assert_allclose(EA.mean(axis=0) - E.mean(axis=0), rep.increment, atol=1e-12)


def test_etkf_zero_innovation(rng):
    E = rng.standard_normal((8, 3))
    opH = ObservationOperator.identity(3)
    R = DiagonalCovariance(np.ones(3))
    EA, _ = etkf_analysis(E, opH, R, E.mean(axis=0))
    np.testing.assert_allclose(EA.mean(axis=0), E.mean(axis=0), atol=1e-12)
    X = anomalies(E)
    # with R = I the normalized observation anomalies equal X; X^A = X^F W^{1/2}
    vals, vecs = np.linalg.eigh(np.eye(8) + X.T @ X)
    W_sym = vecs @ np.diag(vals ** -0.5) @ vecs.T
    np.testing.assert_allclose(anomalies(EA), X @ W_sym, atol=1e-12)


def test_etkf_matches_kf_with_spanning_anomalies(rng):
    P, H, R, x, y = gaussian_setup(rng, 4, 2)
    E = spanning_ensemble(rng, x, P, 9)
    EA, _ = etkf_analysis(E, H, DenseCovariance(R), y)
    xa, Pa, _ = kf_ref(x, P, H, R, y)
    np.testing.assert_allclose(EA.mean(axis=0), xa, atol=1e-8)
    X = anomalies(EA)
    np.testing.assert_allclose(X @ X.T, Pa, atol=1e-8)


def test_etkf_anomalies_sum_to_zero(rng):
    m = lorenz96(n=10)
    E = 8 + rng.standard_normal((6, 10))
    opH = ObservationOperator.subsample(10, range(0, 10, 2))
    R = DiagonalCovariance(np.full(5, 0.5))
    for _ in range(10):
        E, _ = etkf_analysis(E, opH, R, rng.standard_normal(5) + 8)
        X = (E - E.mean(axis=0)).T
        assert np.max(np.abs(X @ np.ones(6))) <= 1e-10
        E = m.step(E)


def test_etkf_V_invariance(rng):
    r = 7
    E = rng.standard_normal((r, 3))
    opH = ObservationOperator.identity(3)
    R = DiagonalCovariance(np.ones(3))
    y = rng.standard_normal(3)
    V = random_orthogonal_preserving_ones(r, seed=5)
    np.testing.assert_allclose(V @ V.T, np.eye(r), atol=1e-12)
    np.testing.assert_allclose(V @ np.ones(r), np.ones(r), atol=1e-12)
    a, _ = etkf_analysis(E, opH, R, y)
    b, _ = etkf_analysis(E, opH, R, y, V=V)
    np.testing.assert_allclose(a.mean(axis=0), b.mean(axis=0), atol=1e-10)
    Xa, Xb = anomalies(a), anomalies(b)
    np.testing.assert_allclose(Xa @ Xa.T, Xb @ Xb.T, atol=1e-10)
    assert np.max(np.abs(a - b)) > 1e-6
    with pytest.raises(ValueError):
        etkf_analysis(E, opH, R, y, V=-np.eye(r))


@given(st.integers(2, 12), st.integers(0, 2 ** 31))
def test_random_orthogonal_preserving_ones_property(r, seed):
    V = random_orthogonal_preserving_ones(r, seed)
    assert np.max(np.abs(V.T @ V - np.eye(r))) <= 1e-12
    assert np.max(np.abs(V @ np.ones(r) - 1)) <= 1e-12


# ---------------------------------------------------------------- run_filter


def test_run_filter_no_observations(rng):
    m = lorenz63()
    x0 = np.array([1.0, 2.0, 20.0])
    run = run_filter("ekf", FilterState(x0, cov=np.eye(3)), m, ObservationOperator.identity(3), None, 5)
    np.testing.assert_allclose(run.analysis_means, m.propagate(x0, 5), atol=1e-12)
    assert run.analysis_times == []


def test_run_filter_one_observation_kf(rng):
    M = rng.standard_normal((3, 3)) * 0.5
    P, H, R, x, y = gaussian_setup(rng, 3, 2)
    obs = ObservationBatch([1], [y], DenseCovariance(R))
    run = run_filter("kf", FilterState(x, cov=P), linear_model(M), ObservationOperator.linear(H), obs, 1)
    xf, Pf = kf_fc_ref(x, P, M)
    xa, Pa, _ = kf_ref(xf, Pf, H, R, y)
    np.testing.assert_allclose(run.analysis_means[1], xa, atol=1e-12)
    np.testing.assert_allclose(run.final.cov, Pa, atol=1e-12)


@pytest.mark.parametrize("method", ["ekf", "seek", "rrsqrt", "enkf", "etkf"])
def test_run_filter_bookkeeping(method):
    rng = np.random.default_rng(9)
    n, N = 10, 12
    m = lorenz96(n=n)
    opH = ObservationOperator.subsample(n, range(0, n, 2))
    times = list(range(0, N + 1, 3))
    R = DiagonalCovariance(np.full(opH.p, 0.5))
    obs = ObservationBatch(times, 8 + rng.standard_normal((len(times), opH.p)), R)
    x0 = 8 + rng.standard_normal(n)
    if method == "ekf":
        init = FilterState(x0, cov=np.eye(n))
    elif method in ("seek", "rrsqrt"):
        init = FilterState(x0, factor=np.eye(n)[:, :4])
    else:
        init = x0 + rng.standard_normal((8, n))
    T = np.eye(n)[:, :1] * 0.1 if method == "rrsqrt" else None
    run = run_filter(method, init, m, opH, obs, N, T=T, seed=4)
    assert run.forecast_means.shape == (N + 1, n) and run.analysis_means.shape == (N + 1, n)
    assert run.forecast_spread.shape == (N + 1,) and len(run.analysis_spread) == N + 1
    assert run.analysis_times == times and len(run.gains) == len(times)
    skipped = [t for t in range(N + 1) if t not in times]
    for t in skipped:
        np.testing.assert_array_equal(run.analysis_means[t], run.forecast_means[t])
    if method in ("enkf", "etkf"):
        again = run_filter(method, init, m, opH, obs, N, seed=4)
        np.testing.assert_array_equal(again.analysis_means, run.analysis_means)


def test_run_filter_unknown_method():
    with pytest.raises(ValueError):
        run_filter("pf", np.zeros((2, 2)), linear_model(np.eye(2)), ObservationOperator.identity(2), None, 1)
