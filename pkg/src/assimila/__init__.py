"""Variational and sequential data assimilation at desk scale."""
from . import covariance, errors, filters, linalg, models, observations, variational, weak4dvar
from .covariance import DenseCovariance, DiagonalCovariance, LowRankCovariance, as_covariance
from .models import Model, linear_advection, linear_model, lorenz63, lorenz96
from .observations import ObservationBatch, ObservationOperator, synthesize_observations

__version__ = "0.1.0"

__all__ = [
    "DenseCovariance",
    "DiagonalCovariance",
    "LowRankCovariance",
    "Model",
    "ObservationBatch",
    "ObservationOperator",
    "as_covariance",
    "covariance",
    "errors",
    "filters",
    "linalg",
    "linear_advection",
    "linear_model",
    "lorenz63",
    "lorenz96",
    "models",
    "observations",
    "synthesize_observations",
    "variational",
    "weak4dvar",
]
