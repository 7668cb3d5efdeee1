"""Configuration, experiment drivers and result files for the command line."""
from .analysis import ConvergenceRow, ExactMatchError, SlopeFit, fit_slope
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import HarnessError, run_experiment

__all__ = ["ConvergenceRow", "ExactMatchError", "SlopeFit", "fit_slope", "ConfigError", "ExperimentConfig",
           "load_config", "HarnessError", "run_experiment"]
