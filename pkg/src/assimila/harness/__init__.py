"""Twin-experiment harness and CLI."""
from .config import ExperimentConfig, build_covariance, load_config, load_schema, validate_config
from .twin import TwinFailure, TwinReport, ensemble_spread, report_bytes, rmse, run_twin

__all__ = [
    "ExperimentConfig",
    "TwinFailure",
    "TwinReport",
    "build_covariance",
    "ensemble_spread",
    "load_config",
    "load_schema",
    "report_bytes",
    "rmse",
    "run_twin",
    "validate_config",
]
