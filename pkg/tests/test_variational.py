import warnings

import numpy as np
import pytest

from assimila.covariance import DenseCovariance, DiagonalCovariance
from assimila.errors import InvalidSpectrum
from assimila.linalg import EigenPairs, conjugate_gradient
from assimila.models import linear_advection, linear_model, lorenz63
from assimila.observations import ObservationBatch, ObservationOperator, synthesize_observations
from assimila.variational import (
    DescentConfig,
    PreconditionerSpec,
    StackedObservation,
    VarProblem,
    cost_3dvar,
    cost_strong4dvar,
    dual_cost,
    dual_psas_solve,
    first_level_transform,
    grad_3dvar,
    grad_strong4dvar,
    hessian_operator,
    incremental_4dvar,
    optimal_interpolation,
    posterior_covariance,
    psas_4dvar,
    solve_3dvar,
    solve_strong4dvar,
    spectral_lmp,
)
from oracles import (
    fd_gradient,
    linear_4dvar_solution,
    quadratic_cost,
    random_spd,
    stacked_H,
)


def scalar_problem(y=2.0):
    return VarProblem(linear_model([[1.0]]), ObservationOperator.identity(1),
                      ObservationBatch([0], [[y]], DiagonalCovariance([1.0])),
                      DiagonalCovariance([1.0]), np.zeros(1))


def linear_window(rng, n=6, p=3, N=4, times=None):
    """Linear model and operator; returns the problem and the dense pieces."""
    M = np.eye(n) + 0.3 * rng.standard_normal((n, n)) / np.sqrt(n)
    H = rng.standard_normal((p, n))
    B = random_spd(rng, n)
    R = random_spd(rng, p, shift=0.5)
    times = list(range(N + 1)) if times is None else times
    ys = rng.standard_normal((len(times), p))
    xb = rng.standard_normal(n)
    prob = VarProblem(linear_model(M), ObservationOperator.linear(H),
                      ObservationBatch(times, ys, DenseCovariance(R)), DenseCovariance(B), xb, N)
    return prob, dict(M=M, H=H, B=B, R=R, ys=list(ys), times=times, xb=xb)


def l63_window(seed, N=5):
    rng = np.random.default_rng(seed)
    m = lorenz63()
    truth = m.propagate(np.array([1.0, 2.0, 20.0]) + rng.standard_normal(3), N)
    opH = ObservationOperator.subsample(3, [0, 2])
    R = DiagonalCovariance([0.5, 0.5])
    obs = synthesize_observations(truth, opH, R, range(N + 1), seed=seed)
    xb = truth[0] + rng.standard_normal(3)
    return VarProblem(m, opH, obs, DiagonalCovariance([1.0, 1.0, 1.0]), xb, N), truth


# ---------------------------------------------------------------- costs


def test_cost_3dvar_examples(rng):
    p = scalar_problem()
    assert cost_3dvar(np.array([1.0]), p) == pytest.approx(1.0)
    np_ = VarProblem(linear_model(np.eye(2)), ObservationOperator.identity(2),
                     ObservationBatch([0], [[1.0, 2.0]], DiagonalCovariance([1.0, 1.0])),
                     DiagonalCovariance([1.0, 1.0]), np.array([1.0, 2.0]))
    assert cost_3dvar(np_.xb, np_) == 0.0


def test_cost_3dvar_vs_quadratic(rng):
    prob, d = linear_window(rng, N=0)
    x = rng.standard_normal(prob.n)
    ref = quadratic_cost(x, d["xb"], d["B"], d["H"], d["R"], d["ys"][0])
    assert cost_3dvar(x, prob) == pytest.approx(ref, rel=1e-12)


def test_cost_4dvar_examples(rng):
    prob, truth = l63_window(1)
    perfect = VarProblem(prob.model, prob.obs_operator,
                         ObservationBatch(range(6), [prob.obs_operator(s) for s in truth], prob.obs.covariance(0)),
                         prob.B, truth[0], 5)
    assert cost_strong4dvar(truth[0], perfect) == pytest.approx(0.0, abs=1e-20)
    p0, _ = linear_window(rng, N=0)
    x = rng.standard_normal(p0.n)
    assert cost_strong4dvar(x, p0) == pytest.approx(cost_3dvar(x, p0), rel=1e-14)


def test_cost_4dvar_brute_force(rng):
    prob, d = linear_window(rng, N=3, times=[0, 2, 3])
    x = rng.standard_normal(prob.n)
    Hs = stacked_H(d["M"], d["H"], d["times"])
    Rs = np.kron(np.eye(3), d["R"])
    ref = quadratic_cost(x, d["xb"], d["B"], Hs, Rs, np.concatenate(d["ys"]))
    assert cost_strong4dvar(x, prob) == pytest.approx(ref, rel=1e-10)


# ---------------------------------------------------------------- gradients


def test_gradient_zero_at_optimum(rng):
    prob, d = linear_window(rng)
    x, _ = linear_4dvar_solution(d["M"], d["H"], d["B"], d["R"], d["ys"], d["times"], d["xb"])
    assert np.linalg.norm(grad_strong4dvar(x, prob)) <= 1e-8


def test_gradient_3dvar_identity_form(rng):
    prob = VarProblem(linear_model(np.eye(3)), ObservationOperator.identity(3),
                      ObservationBatch([0], [rng.standard_normal(3)], DiagonalCovariance(np.ones(3))),
                      DiagonalCovariance(np.ones(3)), rng.standard_normal(3))
    x = rng.standard_normal(3)
    expected = (x - prob.xb) + (x - prob.obs.values[0])
    np.testing.assert_allclose(grad_3dvar(x, prob), expected, atol=1e-14)
    g = grad_3dvar(x, prob)
    assert cost_3dvar(x - 1e-3 * g, prob) < cost_3dvar(x, prob)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_l63_fd(seed):
    prob, _ = l63_window(seed)
    x = prob.xb + 0.1
    g = grad_strong4dvar(x, prob)
    fd = fd_gradient(lambda z: cost_strong4dvar(z, prob), x)
    assert np.linalg.norm(g - fd) <= 3e-5 * np.linalg.norm(g)


# ---------------------------------------------------------------- OI


def test_oi_scalar():
    res = optimal_interpolation(scalar_problem())
    assert res.K[0, 0] == pytest.approx(0.5)
    assert res.x[0] == pytest.approx(1.0)
    assert res.gain_gap <= 1e-12


def test_oi_small_R_inverts_H(rng):
    H = rng.standard_normal((4, 4)) + 3 * np.eye(4)
    y = rng.standard_normal(4)
    prob = VarProblem(linear_model(np.eye(4)), ObservationOperator.linear(H),
                      ObservationBatch([0], [y], DiagonalCovariance(np.full(4, 1e-12))),
                      DiagonalCovariance(np.ones(4)), np.zeros(4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimal_interpolation(prob)
    np.testing.assert_allclose(res.x, np.linalg.solve(H, y), atol=1e-8)


def test_oi_matches_dense_least_squares(rng):
    prob, d = linear_window(rng, n=10, p=4, N=0)
    ref, _ = linear_4dvar_solution(d["M"], d["H"], d["B"], d["R"], d["ys"], d["times"], d["xb"])
    res = optimal_interpolation(prob)
    np.testing.assert_allclose(res.x, ref, rtol=1e-9, atol=1e-10)
    assert res.gain_gap <= 1e-8


def test_oi_zero_observations(rng):
    prob = VarProblem(linear_model(np.eye(3)), ObservationOperator.identity(3), None,
                      DiagonalCovariance(np.ones(3)), rng.standard_normal(3))
    np.testing.assert_array_equal(optimal_interpolation(prob).x, prob.xb)


# ---------------------------------------------------------------- solvers


def test_strong4dvar_starts_at_optimum(rng):
    prob, d = linear_window(rng)
    x, _ = linear_4dvar_solution(d["M"], d["H"], d["B"], d["R"], d["ys"], d["times"], d["xb"])
    _, diag = solve_strong4dvar(prob, x_init=x)
    assert diag.accepted_steps == 0 and diag.converged


@pytest.mark.parametrize("method", ["gauss_newton", "gradient"])
def test_strong4dvar_linear_advection_matches_oi(method):
    rng = np.random.default_rng(3)
    n, N = 8, 4
    m = linear_advection(n, speed=0.4)
    H = rng.standard_normal((3, n))
    prob = VarProblem(m, ObservationOperator.linear(H),
                      ObservationBatch([1, 2, 4], rng.standard_normal((3, 3)), DiagonalCovariance(np.ones(3))),
                      DiagonalCovariance(np.full(n, 2.0)), rng.standard_normal(n), N)
    cfg = DescentConfig(method=method, outer_max=5000, grad_tol=1e-12, step_tol=1e-16, cg_tol=1e-12)
    x, diag = solve_strong4dvar(prob, cfg)
    np.testing.assert_allclose(x, optimal_interpolation(prob).x, atol=1e-6)


def test_strong4dvar_l63_monotone():
    prob, _ = l63_window(4, N=10)
    x, diag = solve_strong4dvar(prob, DescentConfig(method="gradient", outer_max=50))
    assert diag.costs[-1] <= diag.costs[0]
    assert all(b <= a for a, b in zip(diag.costs, diag.costs[1:]))


def test_incremental_linear_one_outer_step(rng):
    prob, d = linear_window(rng)
    x, diag = incremental_4dvar(prob, DescentConfig(cg_tol=1e-10))
    ref, _ = linear_4dvar_solution(d["M"], d["H"], d["B"], d["R"], d["ys"], d["times"], d["xb"])
    assert diag.accepted_steps == 1
    np.testing.assert_allclose(x, optimal_interpolation(prob).x, atol=1e-6)
    np.testing.assert_allclose(x, ref, atol=1e-6)


def test_incremental_zero_observations(rng):
    prob = VarProblem(lorenz63(), ObservationOperator.identity(3), ObservationBatch.empty(),
                      DiagonalCovariance(np.ones(3)), rng.standard_normal(3), 4)
    x, diag = incremental_4dvar(prob)
    np.testing.assert_array_equal(x, prob.xb)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_incremental_l63_converges(seed):
    prob, _ = l63_window(seed, N=10)
    x, diag = incremental_4dvar(prob, DescentConfig(outer_max=50, grad_tol=1e-9))
    assert diag.grad_norms[-1] <= 1e-5 * diag.grad_norms[0]
    J = diag.costs
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(J, J[1:]))


def test_incremental_preconditioners_agree(rng):
    prob, _ = linear_window(rng, n=8, p=2, N=3)
    ref = optimal_interpolation(prob).x
    for spec in (PreconditionerSpec("first"), PreconditionerSpec("spectral_lmp", k=3)):
        x, diag = incremental_4dvar(prob, DescentConfig(cg_tol=1e-10), spec)
        np.testing.assert_allclose(x, ref, atol=1e-6)


def test_psas_outer_loop_matches_oi(rng):
    prob, _ = linear_window(rng)
    x, diag = psas_4dvar(prob, DescentConfig(cg_tol=1e-12))
    np.testing.assert_allclose(x, optimal_interpolation(prob).x, atol=1e-6)


def test_solve_3dvar_requires_single_time(rng):
    prob, _ = linear_window(rng, N=2)
    with pytest.raises(ValueError):
        solve_3dvar(prob)


# ---------------------------------------------------------------- preconditioning


def test_first_level_examples():
    prob = VarProblem(linear_model(np.eye(3)), ObservationOperator.linear(np.zeros((2, 3))),
                      ObservationBatch([0], [[0.0, 0.0]], DiagonalCovariance([1.0, 1.0])),
                      DiagonalCovariance(np.ones(3)), np.zeros(3))
    np.testing.assert_allclose(first_level_transform(prob).to_dense(), np.eye(3), atol=1e-15)
    assert first_level_transform(scalar_problem()).to_dense()[0, 0] == pytest.approx(2.0)


def test_first_level_spectrum(rng):
    prob, _ = linear_window(rng, n=20, p=2, N=3)
    A = first_level_transform(prob).to_dense()
    ev = np.linalg.eigvalsh(0.5 * (A + A.T))
    assert abs(ev.min() - 1.0) <= 1e-10
    assert np.sum(ev > 1 + 1e-8) <= 2 * 4


def test_lmp_examples(rng):
    np.testing.assert_array_equal(spectral_lmp(EigenPairs.empty(4)).to_dense(), np.eye(4))
    w = np.linalg.qr(rng.standard_normal((5, 1)))[0]
    C = spectral_lmp(EigenPairs(np.array([4.0]), w))
    np.testing.assert_allclose(C.matvec(w[:, 0]), w[:, 0] / 4.0, atol=1e-14)
    with pytest.raises(InvalidSpectrum):
        spectral_lmp(EigenPairs(np.array([0.5]), w))


def test_lmp_full_spectrum_gives_identity(rng):
    prob, _ = linear_window(rng, n=12, p=3, N=2)
    A = first_level_transform(prob).to_dense()
    A = 0.5 * (A + A.T)
    vals, vecs = np.linalg.eigh(A)
    C = spectral_lmp(EigenPairs(vals, vecs)).to_dense()
    np.testing.assert_allclose(C @ A, np.eye(12), atol=1e-8)
    res = conjugate_gradient(A, rng.standard_normal(12), precond=C, tol=1e-10)
    assert res.iterations <= 2


def test_lmp_dedupes_repeated_values(rng):
    w = np.linalg.qr(rng.standard_normal((4, 1)))[0]
    pairs = EigenPairs(np.array([3.0, 3.0 + 1e-12]), np.hstack([w, w]))
    C = spectral_lmp(pairs).to_dense()
    np.testing.assert_allclose(C @ w[:, 0], w[:, 0] / 3.0, atol=1e-12)


# ---------------------------------------------------------------- PSAS and posterior


def test_psas_examples(rng):
    p = VarProblem(linear_model([[1.0]]), ObservationOperator.identity(1),
                   ObservationBatch([0], [[1.0]], DiagonalCovariance([1.0])),
                   DiagonalCovariance([1.0]), np.zeros(1))
    dx, lam, _ = dual_psas_solve(p, full_output=True)
    assert lam[0] == pytest.approx(0.5) and dx[0] == pytest.approx(0.5)
    z = VarProblem(linear_model(np.eye(2)), ObservationOperator.identity(2),
                   ObservationBatch([0], [[1.0, 1.0]], DiagonalCovariance([1.0, 1.0])),
                   DiagonalCovariance([1.0, 1.0]), np.ones(2))
    np.testing.assert_allclose(dual_psas_solve(z), 0.0, atol=1e-15)


def test_psas_primal_agreement(rng):
    prob, _ = linear_window(rng, n=30, p=5, N=0)
    primal = conjugate_gradient(hessian_operator(prob, prob.xb),
                                -grad_strong4dvar(prob.xb, prob), tol=1e-12).x
    dual = dual_psas_solve(prob, tol=1e-12)
    np.testing.assert_allclose(dual, primal, rtol=1e-7, atol=1e-8)


def test_dual_cost_minimized_at_lambda(rng):
    prob, _ = linear_window(rng, n=6, p=2, N=2)
    _, lam, _ = dual_psas_solve(prob, tol=1e-12, full_output=True)
    D0 = dual_cost(lam, prob)
    for _ in range(5):
        assert dual_cost(lam + 1e-3 * rng.standard_normal(lam.size), prob) > D0


def test_posterior_examples(rng):
    prob = VarProblem(linear_model(np.eye(3)), ObservationOperator.identity(3), None,
                      DenseCovariance(random_spd(rng, 3)), np.zeros(3))
    np.testing.assert_array_equal(posterior_covariance(prob), prob.B.to_dense())
    assert posterior_covariance(scalar_problem())[0, 0] == pytest.approx(0.5)


def test_posterior_matches_dense_inverse(rng):
    prob, d = linear_window(rng, n=5, p=2, N=3)
    _, A = linear_4dvar_solution(d["M"], d["H"], d["B"], d["R"], d["ys"], d["times"], d["xb"])
    np.testing.assert_allclose(posterior_covariance(prob), A, atol=1e-10)


# ---------------------------------------------------------------- stacked operator


def test_stacked_observation_adjoint_and_dense(rng):
    prob, d = linear_window(rng, n=5, p=2, N=4, times=[0, 1, 3])
    Hs = StackedObservation(prob, prob.trajectory(prob.xb))
    np.testing.assert_allclose(Hs.operator().to_dense(), stacked_H(d["M"], d["H"], d["times"]), atol=1e-12)
    for _ in range(100):
        u, w = rng.standard_normal(5), rng.standard_normal(Hs.m)
        Hu = Hs.matvec(u)
        assert abs(Hu @ w - u @ Hs.rmatvec(w)) <= 1e-10 * np.linalg.norm(Hu) * np.linalg.norm(w)


def test_monotone_outer_cost_on_nonlinear():
    prob, _ = l63_window(9, N=25)
    _, diag = incremental_4dvar(prob, DescentConfig(outer_max=30))
    J = diag.costs
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(J, J[1:]))
