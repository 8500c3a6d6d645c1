"""Fairness-aware neural network pruning on a small numpy autodiff engine"""
from .errors import ConfigError, DataError, FairGrapeError, NumericError
from .models import ExperimentConfig, FairnessReport, PruneConfig, RunManifest

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "ExperimentConfig",
    "FairGrapeError",
    "FairnessReport",
    "NumericError",
    "PruneConfig",
    "RunManifest",
]
