"""Federated normalization protocols.

Each protocol is split into the work a client does on its local batch and
the work the server does once every report of the round is in:

* FBN: clients normalize with the *shared* running statistics and report
  locally updated running statistics; the server averages them and adds a
  dispersion term so the result matches BatchNorm run on the union of all
  batches.
* Naive: clients run plain BatchNorm on their own batch; the server averages
  the running statistics with no correction.
* FixBN: Naive until a switch round, then every client normalizes with the
  statistics frozen at that round.

The centralized reference is plain BatchNorm (:func:`batchnorm_step`) applied
to the concatenation of the clients' batches.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fednorm.errors import DimensionError, InvalidStatisticsError, ProtocolError
from fednorm.stats import (
    AffineParams,
    RunningStats,
    as_batch,
    batch_moments,
    bessel,
    normalize,
    update_running,
)


@dataclass(frozen=True)
class ClientStatsReport:
    """Locally updated running statistics one client sends to the server."""

    run_mean: np.ndarray
    run_var: np.ndarray
    client_id: int = 0

    def __post_init__(self):
        m = np.asarray(self.run_mean, dtype=np.float64).reshape(-1)
        v = np.asarray(self.run_var, dtype=np.float64).reshape(-1)
        if m.shape != v.shape:
            raise DimensionError(f"report {self.client_id}: mean/var lengths differ")
        object.__setattr__(self, "run_mean", m)
        object.__setattr__(self, "run_var", v)

    @property
    def dim(self) -> int:
        return self.run_mean.shape[0]


@dataclass(frozen=True)
class SharedState:
    """Running statistics held by the server and broadcast to every client."""

    stats: RunningStats
    n: int
    k_per_client: int
    round: int = 0

    def __post_init__(self):
        if self.n < 1 or self.k_per_client < 1:
            raise ProtocolError(f"need n >= 1 and K >= 1, got n={self.n}, K={self.k_per_client}")
        if self.n * self.k_per_client < 2:
            raise InvalidStatisticsError("FBN needs K*n >= 2 for the Bessel correction")

    @property
    def total_count(self) -> int:
        return self.n * self.k_per_client

    def advance(self, stats: RunningStats) -> SharedState:
        return SharedState(stats, self.n, self.k_per_client, self.round + 1)


class Phase(enum.Enum):
    BATCH = "batch"
    FROZEN = "frozen"


@dataclass(frozen=True)
class FixBnState:
    """Where a FixBN run stands relative to its switch round."""

    round: int
    switch_round: int
    frozen_stats: RunningStats | None = None

    @property
    def phase(self) -> Phase:
        return Phase.FROZEN if self.round >= self.switch_round else Phase.BATCH


def report_from_stats(stats: RunningStats, client_id: int = 0) -> ClientStatsReport:
    return ClientStatsReport(stats.mean, stats.var, client_id)


def _check_reports(reports: Sequence[ClientStatsReport]) -> tuple[np.ndarray, np.ndarray]:
    if not reports:
        raise ProtocolError("no client reports to aggregate")
    d = reports[0].dim
    for r in reports:
        if r.dim != d:
            raise DimensionError(f"report {r.client_id} has dimension {r.dim}, expected {d}")
        if (r.run_var < 0).any():
            raise InvalidStatisticsError(f"report {r.client_id} carries a negative running variance")
    means = np.stack([r.run_mean for r in reports])
    variances = np.stack([r.run_var for r in reports])
    return means, variances


# --------------------------------------------------------------------------
# centralized BatchNorm (also the per-client step of Naive)
# --------------------------------------------------------------------------


def batchnorm_step(batch, stats: RunningStats, affine: AffineParams) -> tuple[np.ndarray, RunningStats]:
    """Plain BatchNorm on one batch: normalize with its own moments."""
    arr = as_batch(batch)
    k = arr.shape[0]
    if k < 2:
        raise InvalidStatisticsError(f"BatchNorm needs at least 2 samples per batch, got {k}")
    m = batch_moments(arr)
    out = normalize(arr, m.mean, m.var_biased, stats.eps, affine)
    return out, update_running(stats, m, k)


# --------------------------------------------------------------------------
# FBN
# --------------------------------------------------------------------------


def fbn_client_step(
    batch, shared: SharedState, affine: AffineParams, client_id: int = 0
) -> tuple[np.ndarray, ClientStatsReport]:
    arr = as_batch(batch)
    if arr.shape[0] != shared.k_per_client:
        raise ProtocolError(
            f"client {client_id} batch has {arr.shape[0]} rows, protocol expects K={shared.k_per_client}"
        )
    stats = shared.stats
    if arr.shape[1] != stats.dim:
        raise DimensionError(f"batch has {arr.shape[1]} features, shared stats {stats.dim}")
    out = normalize(arr, stats.mean, stats.var, stats.eps, affine)
    local = update_running(stats, batch_moments(arr), shared.total_count)
    return out, ClientStatsReport(local.mean, local.var, client_id)


def fbn_correction(means: np.ndarray, centre: np.ndarray, total_count: int, momentum: float) -> np.ndarray:
    """Dispersion term restoring the between-client share of the variance."""
    dev = means - centre
    return bessel(total_count) / momentum * np.mean(dev * dev, axis=0)


def fbn_server_aggregate(reports: Sequence[ClientStatsReport], shared: SharedState) -> RunningStats:
    if len(reports) != shared.n:
        raise ProtocolError(f"expected {shared.n} reports, got {len(reports)}")
    means, variances = _check_reports(reports)
    new_mean = np.mean(means, axis=0)
    new_var = np.mean(variances, axis=0) + fbn_correction(
        means, new_mean, shared.total_count, shared.stats.momentum
    )
    return shared.stats.replace(mean=new_mean, var=new_var)


# --------------------------------------------------------------------------
# Naive
# --------------------------------------------------------------------------


def naive_client_step(batch, local: RunningStats, affine: AffineParams) -> tuple[np.ndarray, RunningStats]:
    return batchnorm_step(batch, local, affine)


def naive_server_aggregate(reports: Sequence[ClientStatsReport], template: RunningStats | None = None) -> RunningStats:
    """Plain coordinate-wise average of the reported running statistics.

    ``template`` supplies momentum and eps for the returned stats.
    """
    means, variances = _check_reports(reports)
    mean = np.mean(means, axis=0)
    var = np.mean(variances, axis=0)
    if template is None:
        return RunningStats(mean, var)
    return template.replace(mean=mean, var=var)


# --------------------------------------------------------------------------
# FixBN
# --------------------------------------------------------------------------


def fixbn_step(
    batch, state: FixBnState, local: RunningStats, affine: AffineParams
) -> tuple[np.ndarray, RunningStats]:
    if state.phase is Phase.BATCH:
        return naive_client_step(batch, local, affine)
    if state.frozen_stats is None:
        raise ProtocolError(f"FixBN is past its switch round ({state.switch_round}) but no statistics were frozen")
    fs = state.frozen_stats
    return normalize(batch, fs.mean, fs.var, fs.eps, affine), local


def eval_normalize(batch, stats: RunningStats, affine: AffineParams) -> np.ndarray:
    """Evaluation-mode normalization with finalized running statistics."""
    return normalize(batch, stats.mean, stats.var, stats.eps, affine)
