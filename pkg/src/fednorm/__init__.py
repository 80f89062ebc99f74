"""Federated BatchNorm and baselines: protocols, training harness and experiments."""

from fednorm.errors import ConfigError, FedNormError, NumericalFailure
from fednorm.model import Backend, Mode, Network, toy_architecture
from fednorm.protocols import (
    ClientStatsReport,
    SharedState,
    fbn_client_step,
    fbn_server_aggregate,
    naive_client_step,
    naive_server_aggregate,
)
from fednorm.stats import AffineParams, RunningStats, batch_moments, normalize, update_running

__version__ = "0.1.0"

__all__ = [
    "AffineParams",
    "Backend",
    "ClientStatsReport",
    "ConfigError",
    "FedNormError",
    "Mode",
    "Network",
    "NumericalFailure",
    "RunningStats",
    "SharedState",
    "batch_moments",
    "fbn_client_step",
    "fbn_server_aggregate",
    "naive_client_step",
    "naive_server_aggregate",
    "normalize",
    "toy_architecture",
    "update_running",
]
