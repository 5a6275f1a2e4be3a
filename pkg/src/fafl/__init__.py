"""Fairness-aware federated learning simulator with sealed client/server transport."""

__version__ = "0.1.0"

from .errors import FaflError, ConfigError  # noqa: E402
from .model import Arch, ParamVector, TrainConfig  # noqa: E402
from .data import LabeledDataset, PartitionSpec, generate_synthetic, partition_noniid  # noqa: E402
from .mechanisms import MECHANISMS, MechanismConfig, make_mechanism  # noqa: E402
from .engine import ExperimentConfig, MetricSeries, run_experiment, run_sweep  # noqa: E402
from .config import parse_config, dump_config  # noqa: E402

__all__ = [
    "FaflError", "ConfigError", "Arch", "ParamVector", "TrainConfig", "LabeledDataset",
    "PartitionSpec", "generate_synthetic", "partition_noniid", "MECHANISMS", "MechanismConfig",
    "make_mechanism", "ExperimentConfig", "MetricSeries", "run_experiment", "run_sweep",
    "parse_config", "dump_config",
]
