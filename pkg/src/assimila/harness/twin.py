"""Twin experiments: truth run, synthetic observations, one method, diagnostics."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import AssimilaError, ConfigError, DimensionMismatch, SingularCovariance
from ..filters import FilterState, ensemble_spread, run_filter
from ..linalg import truncated_sym_eig
from ..observations import ObservationBatch, synthesize_observations
from ..variational import (
    DescentConfig,
    PreconditionerSpec,
    VarProblem,
    incremental_4dvar,
    optimal_interpolation,
    psas_4dvar,
    solve_3dvar,
    solve_strong4dvar,
)
from ..weak4dvar import WeakProblem, solve_weak4dvar
from .config import ExperimentConfig, build_covariance, schema_errors, validate_config

__all__ = ["TwinFailure", "TwinReport", "rmse", "ensemble_spread", "run_twin", "report_bytes"]

CSV_HEADER = ("time", "rmse_forecast", "rmse_analysis", "spread", "cost")


class TwinFailure(AssimilaError, RuntimeError):
    """A solver error raised inside a twin run, tagged with the method."""

    def __init__(self, method: str, cause: BaseException):
        super().__init__(f"{method}: {type(cause).__name__}: {cause}")
        self.method = method
        self.cause = cause


def rmse(estimate, truth) -> np.ndarray:
    """Per-time ``sqrt(||x_i - x_i^t||^2 / n)`` for trajectories of shape ``(T, n)``."""
    est = np.atleast_2d(np.asarray(estimate, dtype=float))
    tru = np.atleast_2d(np.asarray(truth, dtype=float))
    if est.shape != tru.shape:
        raise DimensionMismatch(f"estimate shape {est.shape} != truth shape {tru.shape}")
    return np.sqrt(np.mean((est - tru) ** 2, axis=1))


@dataclass
class TwinReport:
    method: str
    seed: int
    n: int
    steps: int
    times: list
    analysis_times: list
    rmse_forecast: list
    rmse_analysis: list
    spread: list
    cost: list
    cost_history: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    outer_iterations: Optional[int] = None
    converged: Optional[bool] = None
    pinv_fallbacks: int = 0
    summary: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, include_wall_time: bool = True) -> str:
        d = self.to_dict()
        if not include_wall_time:
            d.pop("wall_time")
        return json.dumps(d, indent=2, sort_keys=True, allow_nan=False) + "\n"

    def validate(self) -> list:
        """Schema violations of this report (empty when valid)."""
        return schema_errors(json.loads(self.to_json()), "report")

    def series_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        fmt = lambda v: "" if v is None else format(float(v), ".17g")  # noqa: E731
        for i, t in enumerate(self.times):
            w.writerow([t, fmt(self.rmse_forecast[i]), fmt(self.rmse_analysis[i]),
                        fmt(self.spread[i]), fmt(self.cost[i])])
        return buf.getvalue()

    def write(self, out_dir, report_name="report.json", series_name="series.csv"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / report_name, "w", newline="\n") as fh:
            fh.write(self.to_json())
        with open(out / series_name, "w", newline="") as fh:
            fh.write(self.series_csv())
        return out / report_name, out / series_name


def report_bytes(report: TwinReport) -> bytes:
    """Report serialization used for determinism checks (wall time excluded)."""
    return report.to_json(include_wall_time=False).encode()


def _initial_state(model, rng):
    n = model.n
    if model.kind == "lorenz63":
        base = np.ones(3)
    elif model.kind == "lorenz96":
        base = np.full(n, model.forcing)
    else:
        base = np.sin(2.0 * np.pi * np.arange(n) / n)
    return base + 0.01 * rng.standard_normal(n)


def _factor(C, r):
    pairs = truncated_sym_eig(C.to_dense(), r)
    return pairs.vectors * np.sqrt(np.clip(pairs.values, 0.0, None))


def _misfit(obs: ObservationBatch, opH, traj, t):
    got = obs.at(t)
    if got is None:
        return None
    y, R = got
    try:
        return 0.5 * R.mahalanobis_sq(y - opH(traj[t]))
    except SingularCovariance:
        # undefined for noise-free observations
        return None


def _descent(cfg: ExperimentConfig, method: str) -> DescentConfig:
    s = cfg.solver
    return DescentConfig(method=s["descent"] if method == "4dvar" else "gauss_newton",
                         outer_max=s["outer_max"], inner_max=s.get("inner_max"),
                         grad_tol=s["grad_tol"], step_tol=s["step_tol"], cg_tol=s["cg_tol"])


def _precond(cfg: ExperimentConfig) -> PreconditionerSpec:
    return PreconditionerSpec(cfg.solver["preconditioner"], cfg.solver["lmp_k"])


def _run_filter_method(cfg, method, model, opH, obs, B, Q, xb, rng):
    N = cfg.steps
    T = None
    if method in ("kf", "ekf"):
        init = FilterState(xb, cov=B.to_dense())
    elif method in ("seek", "rrsqrt"):
        init = FilterState(xb, factor=_factor(B, cfg["rank"]))
        s = cfg.get("model_error_rank", 0)
        if method == "rrsqrt" and s > 0:
            T = _factor(Q, s)
    else:
        init = xb + B.sample(rng, size=cfg["ensemble_size"])
    run = run_filter(method, init, model, opH, obs, N, Q=None if method == "rrsqrt" else Q,
                     T=T, seed=rng)
    return {
        "forecast": run.forecast_means,
        "analysis": run.analysis_means,
        "spread": run.forecast_spread.tolist(),
        "analysis_times": run.analysis_times,
        "pinv_fallbacks": run.pinv_fallbacks,
    }


def _run_cycled_var(cfg, method, model, opH, obs, B, xb):
    N, n = cfg.steps, model.n
    fc = np.empty((N + 1, n))
    an = np.empty((N + 1, n))
    xf = xb
    costs, inner, times = [], [], []
    converged = True
    for i in range(N + 1):
        fc[i] = xf
        got = obs.at(i)
        if got is None:
            an[i] = xf
        else:
            y, R = got
            pr = VarProblem(model, opH, ObservationBatch([0], y[None, :], R), B, xf, 0)
            if method == "oi":
                an[i] = optimal_interpolation(pr).x
            else:
                an[i], diag = solve_3dvar(pr, _descent(cfg, method), _precond(cfg))
                costs.append(diag.costs[-1])
                inner.extend(diag.inner_iterations)
                converged = converged and diag.converged
            times.append(i)
        if i < N:
            xf = model.step(an[i], i)
    return {"forecast": fc, "analysis": an, "analysis_times": times, "cost_history": costs,
            "inner_iterations": inner, "converged": converged if method == "3dvar" else None}


def _run_window(cfg, method, model, opH, obs, B, Q, xb):
    N = cfg.steps
    background = model.propagate(xb, N)
    dc = _descent(cfg, method)
    if method == "weak4dvar":
        pr = WeakProblem(model, opH, obs, B, xb, N, Q=Q)
        traj, diag = solve_weak4dvar(pr, dc, inner=cfg.solver["inner"])
    else:
        pr = VarProblem(model, opH, obs, B, xb, N)
        if method == "4dvar":
            x0, diag = solve_strong4dvar(pr, dc, precond=_precond(cfg))
        elif method == "inc4dvar":
            x0, diag = incremental_4dvar(pr, dc, _precond(cfg))
        else:
            x0, diag = psas_4dvar(pr, dc)
        traj = model.propagate(x0, N)
    return {"forecast": background, "analysis": traj, "analysis_times": list(obs.times),
            "cost_history": list(diag.costs), "inner_iterations": list(diag.inner_iterations),
            "outer_iterations": diag.accepted_steps, "converged": bool(diag.converged)}


def _mean(a):
    return float(np.mean(a)) if len(a) else 0.0


def run_twin(config, seed: Optional[int] = None) -> TwinReport:
    """Run one twin experiment. ``config`` is an ExperimentConfig, dict or JSON path.

    One generator seeded from the config (or ``seed``) drives, in order: the
    spin-up perturbation, observation noise, background error, initial
    ensemble and any filter noise, so identical inputs give identical reports.
    """
    cfg = config if isinstance(config, ExperimentConfig) else validate_config(config)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    t0 = time.perf_counter()
    method = cfg.method
    model = cfg.build_model()
    opH = cfg.build_operator()
    n, N = model.n, cfg.steps
    B = build_covariance(cfg["B"], n)
    R = build_covariance(cfg["R"], opH.p)
    Q = build_covariance(cfg["Q"], n) if cfg.get("Q") is not None else None
    rng = np.random.default_rng(cfg.seed)

    try:
        x = model.propagate(_initial_state(model, rng), cfg["spinup"])[-1]
        truth = model.propagate(x, N)
        obs = synthesize_observations(truth, opH, R, cfg.obs_times(), seed=rng)
        xb = truth[0] + B.sample(rng)
        if method in ("kf", "ekf", "seek", "rrsqrt", "enkf", "etkf"):
            out = _run_filter_method(cfg, method, model, opH, obs, B, Q, xb, rng)
        elif method in ("3dvar", "oi"):
            out = _run_cycled_var(cfg, method, model, opH, obs, B, xb)
        else:
            out = _run_window(cfg, method, model, opH, obs, B, Q, xb)
    except ConfigError:
        raise
    except (AssimilaError, FloatingPointError, np.linalg.LinAlgError) as e:
        raise TwinFailure(method, e) from e

    rf = rmse(out["forecast"], truth)
    ra = rmse(out["analysis"], truth)
    half = (N + 1) // 2
    summary = {
        "mean_rmse_forecast": _mean(rf),
        "mean_rmse_analysis": _mean(ra),
        "second_half_rmse_forecast": _mean(rf[half:]),
        "second_half_rmse_analysis": _mean(ra[half:]),
    }
    return TwinReport(
        method=method,
        seed=int(cfg.seed),
        n=n,
        steps=N,
        times=list(range(N + 1)),
        analysis_times=[int(t) for t in out["analysis_times"]],
        rmse_forecast=rf.tolist(),
        rmse_analysis=ra.tolist(),
        spread=out.get("spread", [None] * (N + 1)),
        cost=[_misfit(obs, opH, out["analysis"], t) for t in range(N + 1)],
        cost_history=[float(c) for c in out.get("cost_history", [])],
        inner_iterations=[int(k) for k in out.get("inner_iterations", [])],
        outer_iterations=out.get("outer_iterations"),
        converged=out.get("converged"),
        pinv_fallbacks=int(out.get("pinv_fallbacks", 0)),
        summary=summary,
        wall_time=time.perf_counter() - t0,
    )
