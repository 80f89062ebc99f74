"""Byzantine attacks on client reports and robust aggregation rules.

Vectors to aggregate are stacked as an ``(n, p)`` array, one row per client.
Attack constructions follow the works that introduced them:

* SF (sign flipping): send the negation of the honest vector.
* FOE (fall of empires): send ``-eps`` times the honest average.
* ALIE (a little is enough): send ``mu - z * sigma`` coordinate-wise, where
  ``mu``/``sigma`` are the honest mean and sample standard deviation and the
  default ``z`` is ``Phi^-1((n - f - s) / (n - f))`` with
  ``s = floor(n/2 + 1) - f``.
* NNM (nearest-neighbour mixing): replace each vector by the mean of its
  ``n - f`` nearest vectors (itself included) before the inner rule.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Sequence

import numpy as np

from fednorm.errors import ConfigError, DimensionError, ProtocolError
from fednorm.protocols import ClientStatsReport, SharedState, _check_reports
from fednorm.stats import RunningStats, bessel


def _stack(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"expected a stack of vectors, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ProtocolError("cannot aggregate an empty set of vectors")
    return arr


# --------------------------------------------------------------------------
# aggregation rules
# --------------------------------------------------------------------------


def coord_median(vectors) -> np.ndarray:
    return np.median(_stack(vectors), axis=0)


def trimmed_mean(vectors, f: int) -> np.ndarray:
    """Drop the ``f`` smallest and ``f`` largest values per coordinate, average the rest."""
    arr = _stack(vectors)
    n = arr.shape[0]
    if f < 0 or n <= 2 * f:
        raise ConfigError(f"trimmed mean needs n > 2f (n={n}, f={f})")
    return np.mean(np.sort(arr, axis=0)[f : n - f], axis=0)


def nnm(vectors, f: int) -> np.ndarray:
    arr = _stack(vectors)
    n = arr.shape[0]
    if f < 0 or n <= f:
        raise ConfigError(f"nearest-neighbour mixing needs n > f (n={n}, f={f})")
    diff = arr[:, None, :] - arr[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    keep = n - f
    out = np.empty_like(arr)
    for i in range(n):
        nearest = np.argsort(dist[i], kind="stable")[:keep]
        out[i] = np.mean(arr[nearest], axis=0)
    return out


class Rule(str, enum.Enum):
    MEAN = "mean"
    MEDIAN = "median"
    TRIMMED_MEAN = "trimmed_mean"


@dataclass(frozen=True)
class Aggregator:
    """A coordinate-wise aggregation rule, optionally preceded by NNM.

    ``f`` is the number of tolerated Byzantine inputs; it is used by the
    trimmed mean and by NNM.
    """

    rule: Rule = Rule.MEAN
    f: int = 0
    use_nnm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rule", Rule(self.rule))
        if self.f < 0:
            raise ConfigError(f"f must be non-negative, got {self.f}")

    @classmethod
    def parse(cls, name: str, f: int = 0) -> Aggregator:
        """Build from names like ``mean``, ``median``, ``nnm+trimmed_mean``."""
        text = name.strip().lower().replace("-", "_")
        use_nnm = False
        if text.startswith("nnm+") or text.startswith("nnm_"):
            use_nnm, text = True, text[4:]
        aliases = {"avg": "mean", "cwmed": "median", "cwtm": "trimmed_mean", "tm": "trimmed_mean", "trmean": "trimmed_mean"}
        text = aliases.get(text, text)
        try:
            rule = Rule(text)
        except ValueError:
            raise ConfigError(f"unknown aggregator {name!r}") from None
        return cls(rule, f, use_nnm)

    @property
    def name(self) -> str:
        return ("nnm+" if self.use_nnm else "") + self.rule.value

    @property
    def is_plain_mean(self) -> bool:
        return self.rule is Rule.MEAN and not self.use_nnm

    def validate(self, n: int) -> None:
        if self.rule is Rule.TRIMMED_MEAN and n <= 2 * self.f:
            raise ConfigError(f"trimmed mean needs n > 2f (n={n}, f={self.f})")
        if self.use_nnm and n <= self.f:
            raise ConfigError(f"NNM needs n > f (n={n}, f={self.f})")

    def __call__(self, vectors) -> np.ndarray:
        arr = _stack(vectors)
        if self.use_nnm:
            arr = nnm(arr, self.f)
        if self.rule is Rule.MEAN:
            return np.mean(arr, axis=0)
        if self.rule is Rule.MEDIAN:
            return coord_median(arr)
        return trimmed_mean(arr, self.f)


MEAN = Aggregator()


def robust_stats_aggregate(
    reports: Sequence[ClientStatsReport], rule: Aggregator, shared: SharedState
) -> RunningStats:
    """FBN server step with every average replaced by ``rule``.

    The mean, the variances and the per-client squared deviations from the
    aggregated mean are each aggregated with the same rule.  With the plain
    mean this is exactly the FBN server update.
    """
    if len(reports) != shared.n:
        raise ProtocolError(f"expected {shared.n} reports, got {len(reports)}")
    means, variances = _check_reports(reports)
    new_mean = rule(means)
    dev = means - new_mean
    new_var = rule(variances) + bessel(shared.total_count) / shared.stats.momentum * rule(dev * dev)
    return shared.stats.replace(mean=new_mean, var=new_var)


def robust_naive_aggregate(
    reports: Sequence[ClientStatsReport], rule: Aggregator, template: RunningStats
) -> RunningStats:
    """Naive server step (no dispersion term) using ``rule`` instead of the mean."""
    means, variances = _check_reports(reports)
    return template.replace(mean=rule(means), var=rule(variances))


# --------------------------------------------------------------------------
# attacks
# --------------------------------------------------------------------------


class AttackKind(str, enum.Enum):
    NONE = "none"
    SF = "sf"
    FOE = "foe"
    ALIE = "alie"


class Target(str, enum.Enum):
    STATS = "stats"
    GRADIENTS = "gradients"
    BOTH = "both"


def alie_auto_z(n: int, f: int) -> float:
    s = math.floor(n / 2 + 1) - f
    honest = n - f
    if honest <= 0:
        raise ConfigError(f"ALIE needs honest clients (n={n}, f={f})")
    return NormalDist().inv_cdf((honest - s) / honest)


def sf_vector(v) -> np.ndarray:
    return -np.asarray(v, dtype=np.float64)


def foe_vector(honest, eps: float = 1.0) -> np.ndarray:
    arr = _stack(honest)
    return -eps * np.mean(arr, axis=0)


def alie_vector(honest, z: float) -> np.ndarray:
    arr = _stack(honest)
    if arr.shape[0] < 2:
        raise ProtocolError("ALIE needs at least two honest vectors to estimate a spread")
    if not math.isfinite(z):
        raise ConfigError(f"ALIE z must be finite, got {z}")
    return np.mean(arr, axis=0) - z * np.std(arr, axis=0, ddof=1)


def attack_sf(report: ClientStatsReport) -> ClientStatsReport:
    return ClientStatsReport(-report.run_mean, report.run_var, report.client_id)


def attack_foe(honest_reports: Sequence[ClientStatsReport], eps: float = 1.0, client_id: int = -1) -> ClientStatsReport:
    if not honest_reports:
        raise ProtocolError("FOE needs at least one honest report")
    means, variances = _check_reports(honest_reports)
    return ClientStatsReport(foe_vector(means, eps), np.mean(variances, axis=0), client_id)


def attack_alie(
    honest_reports: Sequence[ClientStatsReport], n: int, f: int, z: float | None = None, client_id: int = -1
) -> ClientStatsReport:
    if len(honest_reports) < 2:
        raise ProtocolError("ALIE needs at least two honest reports")
    if z is None:
        z = alie_auto_z(n, f)
    means, variances = _check_reports(honest_reports)
    return ClientStatsReport(alie_vector(means, z), np.mean(variances, axis=0), client_id)


@dataclass(frozen=True)
class AttackSpec:
    """Which clients misbehave, how, and on which messages."""

    kind: AttackKind = AttackKind.NONE
    byzantine_ids: frozenset[int] = field(default_factory=frozenset)
    targets: Target = Target.STATS
    eps: float = 1.0
    z: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "targets", Target(self.targets))
        object.__setattr__(self, "byzantine_ids", frozenset(int(i) for i in self.byzantine_ids))

    @classmethod
    def last_clients(cls, kind, n: int, f: int, **kwargs) -> AttackSpec:
        """Attack where clients ``n-f .. n-1`` are Byzantine."""
        return cls(kind, frozenset(range(n - f, n)) if f else frozenset(), **kwargs)

    @property
    def f(self) -> int:
        return len(self.byzantine_ids) if self.active else 0

    @property
    def active(self) -> bool:
        return self.kind is not AttackKind.NONE and bool(self.byzantine_ids)

    @property
    def hits_stats(self) -> bool:
        return self.active and self.targets in (Target.STATS, Target.BOTH)

    @property
    def hits_gradients(self) -> bool:
        return self.active and self.targets in (Target.GRADIENTS, Target.BOTH)

    def validate(self, n: int) -> None:
        bad = [i for i in self.byzantine_ids if not 0 <= i < n]
        if bad:
            raise ConfigError(f"Byzantine ids {sorted(bad)} outside 0..{n - 1}")
        if self.active and not 2 * len(self.byzantine_ids) < n:
            raise ConfigError(f"need f < n/2, got f={len(self.byzantine_ids)}, n={n}")

    def corrupt_reports(self, reports: Sequence[ClientStatsReport]) -> list[ClientStatsReport]:
        """Replace the Byzantine clients' reports (omniscient adversary)."""
        if not self.hits_stats:
            return list(reports)
        n = len(reports)
        honest = [r for r in reports if r.client_id not in self.byzantine_ids]
        if self.kind is AttackKind.FOE:
            crafted = attack_foe(honest, self.eps)
        elif self.kind is AttackKind.ALIE:
            crafted = attack_alie(honest, n, len(self.byzantine_ids), self.z)
        out = []
        for r in reports:
            if r.client_id not in self.byzantine_ids:
                out.append(r)
            elif self.kind is AttackKind.SF:
                out.append(attack_sf(r))
            else:
                out.append(ClientStatsReport(crafted.run_mean, crafted.run_var, r.client_id))
        return out

    def corrupt_vectors(self, vectors: np.ndarray) -> np.ndarray:
        """Replace Byzantine rows of an ``(n, p)`` stack of gradients."""
        if not self.hits_gradients:
            return vectors
        vectors = np.array(vectors, dtype=np.float64)
        ids = sorted(self.byzantine_ids)
        honest = np.delete(vectors, ids, axis=0)
        if self.kind is AttackKind.SF:
            vectors[ids] = -vectors[ids]
        elif self.kind is AttackKind.FOE:
            vectors[ids] = foe_vector(honest, self.eps)
        else:
            z = alie_auto_z(vectors.shape[0], len(ids)) if self.z is None else self.z
            vectors[ids] = alie_vector(honest, z)
        return vectors
