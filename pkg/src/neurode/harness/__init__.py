"""Config-driven experiments on small synthetic tasks."""

from .config import ConfigError, ExperimentConfig
from .data import generate_dataset
from .experiment import Experiment, MetricsReport, NumericalFailure, evaluate, train

__all__ = ["ConfigError", "ExperimentConfig", "generate_dataset", "Experiment", "MetricsReport",
           "NumericalFailure", "evaluate", "train"]
