"""fedscape: federated and federated-continual learning on a root/top split model."""

from .config import ExperimentConfig, apply_overrides, load_config
from .errors import ConfigError, FedscapeError, IngestionError, NumericError, ReplayError
from .harness import RunResult, deterministic_replay, run_experiment, run_fcl, run_fl
from .model import ParamSet, RootTopModel, Segment

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "apply_overrides", "load_config", "ConfigError", "FedscapeError",
           "IngestionError", "NumericError", "ReplayError", "RunResult", "deterministic_replay",
           "run_experiment", "run_fcl", "run_fl", "ParamSet", "RootTopModel", "Segment"]
