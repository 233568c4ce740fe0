"""Experiment configuration: JSON schema validation plus method-specific checks."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Union

import jsonschema

from ..covariance import DenseCovariance, DiagonalCovariance, gaussian_correlation_B
from ..errors import AssimilaError, ConfigError
from ..models import Model
from ..observations import ObservationOperator

METHODS = ("kf", "ekf", "seek", "rrsqrt", "enkf", "etkf", "3dvar", "oi",
           "4dvar", "inc4dvar", "weak4dvar", "psas")
ENSEMBLE_METHODS = ("enkf", "etkf")
WINDOW_METHODS = ("4dvar", "inc4dvar", "weak4dvar", "psas")

MODEL_DEFAULTS = {
    "lorenz63": {"n": 3, "dt": 0.01},
    "lorenz96": {"n": 40, "dt": 0.05},
    "linear_advection": {"n": 20, "dt": 1.0},
    "linear": {"dt": 1.0},
}

SOLVER_DEFAULTS = {
    "descent": "gradient",
    "outer_max": 20,
    "grad_tol": 1e-6,
    "step_tol": 1e-10,
    "cg_tol": 1e-8,
    "preconditioner": "none",
    "lmp_k": 0,
    "inner": "saddle",
}


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    """One of the schemas shipped with the package: ``config`` or ``report``."""
    text = resources.files("assimila.harness").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def schema_errors(data, name: str = "config") -> list:
    validator = jsonschema.Draft202012Validator(load_schema(name))
    errs = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    return [f"{_path(e)}: {e.message}" for e in errs]


@dataclass
class ExperimentConfig:
    """A validated configuration with defaults filled in (``data``)."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)

    @property
    def method(self) -> str:
        return self.data["method"]

    @property
    def steps(self) -> int:
        return self.data["steps"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def solver(self) -> dict:
        return self.data["solver"]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        d["seed"] = int(seed)
        return validate_config(d)

    def build_model(self) -> Model:
        m = dict(self.data["model"])
        kind = m.pop("kind")
        return Model(kind, **m)

    def build_operator(self) -> ObservationOperator:
        return ObservationOperator.from_json(self.data["observations"]["operator"],
                                             self.data["model"]["n"])

    def obs_times(self) -> list:
        o = self.data["observations"]
        if "times" in o:
            return sorted(set(int(t) for t in o["times"]))
        return list(range(o.get("start", 0), self.steps + 1, o.get("every", 1)))


def build_covariance(spec: dict, dim: int):
    kind = spec["kind"]
    if kind == "diagonal":
        if "variances" in spec:
            cov = DiagonalCovariance(spec["variances"])
        elif "variance" in spec:
            cov = DiagonalCovariance.scalar(dim, spec["variance"])
        else:
            raise ConfigError("diagonal covariance needs 'variance' or 'variances'")
    elif kind == "dense":
        if "matrix" not in spec:
            raise ConfigError("dense covariance needs 'matrix'")
        cov = DenseCovariance(spec["matrix"])
    else:
        if "length_scale" not in spec or "variance" not in spec:
            raise ConfigError("gaussian covariance needs 'variance' and 'length_scale'")
        cov = gaussian_correlation_B(dim, spec["length_scale"], spec["variance"])
    if cov.dim != dim:
        raise ConfigError(f"covariance has dimension {cov.dim}, expected {dim}")
    return cov


def _fill_defaults(d: dict) -> dict:
    d = copy.deepcopy(d)
    model = d["model"]
    for k, v in MODEL_DEFAULTS[model["kind"]].items():
        model.setdefault(k, v)
    if model["kind"] == "linear" and "matrix" in model:
        model.setdefault("n", len(model["matrix"]))
    chaotic = model["kind"] in ("lorenz63", "lorenz96")
    d.setdefault("spinup", 1000 if chaotic else 0)
    d.setdefault("seed", 0)
    solver = d.setdefault("solver", {})
    if d["method"] == "4dvar" and solver.get("descent", "gradient") == "gradient":
        # steepest descent needs far more outer steps than Gauss-Newton
        solver.setdefault("outer_max", 200)
    for k, v in SOLVER_DEFAULTS.items():
        solver.setdefault(k, v)
    obs = d["observations"]
    obs.setdefault("every", 1)
    obs.setdefault("start", 0)
    d.setdefault("output", {})
    d["output"].setdefault("dir", ".")
    d["output"].setdefault("report", "report.json")
    d["output"].setdefault("series", "series.csv")
    return d


def _method_checks(cfg: ExperimentConfig) -> list:
    errs = []
    d = cfg.data
    method = d["method"]
    kind = d["model"]["kind"]
    if kind == "linear" and "matrix" not in d["model"]:
        return ["model.matrix: required for the linear model kind"]
    n = d["model"]["n"]
    if method == "kf" and kind not in ("linear", "linear_advection"):
        errs.append(f"method: kf requires a linear model, got {kind}; use ekf")
    if method in ENSEMBLE_METHODS:
        r = d.get("ensemble_size")
        if r is None:
            errs.append(f"ensemble_size: required for {method}")
        elif r < 2:
            errs.append(f"ensemble_size: {method} needs at least 2 members, got {r}")
    if method in ("seek", "rrsqrt"):
        r = d.get("rank")
        if r is None:
            errs.append(f"rank: required for {method}")
        elif r > n:
            errs.append(f"rank: {r} exceeds the state dimension {n}")
    if method == "rrsqrt":
        s = d.get("model_error_rank", 0)
        r = d.get("rank")
        if r is not None and not s < r:
            errs.append(f"model_error_rank: needs s < r, got s={s}, r={r}")
        if s > 0 and "Q" not in d:
            errs.append("Q: required when model_error_rank > 0")
    if method == "weak4dvar" and "Q" not in d:
        errs.append("Q: required for weak4dvar")
    times = cfg.obs_times()
    if any(t > d["steps"] for t in times):
        errs.append(f"observations.times: must lie in [0, {d['steps']}]")
    solver = d["solver"]
    if solver["preconditioner"] == "spectral_lmp" and method not in ("inc4dvar", "3dvar", "4dvar"):
        errs.append("solver.preconditioner: spectral_lmp applies to 3dvar, 4dvar and inc4dvar only")
    if errs:
        return errs
    try:
        cfg.build_model()
        op = cfg.build_operator()
        build_covariance(d["B"], n)
        build_covariance(d["R"], op.p)
        if "Q" in d:
            build_covariance(d["Q"], n)
    except ConfigError as e:
        errs.extend(e.errors)
    except (AssimilaError, ValueError, TypeError) as e:
        errs.append(str(e))
    return errs


def validate_config(data: Union[dict, str, Path]) -> ExperimentConfig:
    """Validate a config dict (or path to a JSON file). Raises ConfigError listing every problem."""
    if not isinstance(data, dict):
        try:
            data = json.loads(Path(data).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config: {e}") from None
    errs = schema_errors(data)
    if errs:
        raise ConfigError(errs)
    cfg = ExperimentConfig(_fill_defaults(data))
    errs = _method_checks(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


def load_config(path) -> ExperimentConfig:
    return validate_config(Path(path))
