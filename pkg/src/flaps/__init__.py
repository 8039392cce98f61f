"""Desk-scale simulator for cluster-headed federated learning with shuffled DP reports.

The building blocks live in their own modules (data, clustering, buds, ara,
learning, messages, orchestrator, experiment); the names most callers need
are re-exported here. The HTTP layer is `flaps.service` and the command line
is `flaps.cli`.
"""

from .experiment import (
    ConfigError,
    DatasetSpec,
    ExperimentConfig,
    build_cohort,
    build_dataset,
    parse_config,
    read_metrics_csv,
    read_time_csv,
    run_sweep,
    write_metrics_csv,
    write_time_csv,
)
from .learning import Metrics, ModelArch, TrainConfig
from .orchestrator import (
    DropModel,
    RoundAborted,
    RoundConfig,
    RoundFailed,
    RoundResult,
    TimingRecord,
    restart_round,
    run_round,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetSpec",
    "DropModel",
    "ExperimentConfig",
    "Metrics",
    "ModelArch",
    "RoundAborted",
    "RoundConfig",
    "RoundFailed",
    "RoundResult",
    "TimingRecord",
    "TrainConfig",
    "__version__",
    "build_cohort",
    "build_dataset",
    "parse_config",
    "read_metrics_csv",
    "read_time_csv",
    "restart_round",
    "run_round",
    "run_sweep",
    "write_metrics_csv",
    "write_time_csv",
]
