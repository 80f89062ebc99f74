"""Statistics kernels shared by every normalization variant.

A feature batch is a ``(K, d)`` float array, one sample per row.  All kernels
work coordinate-wise over the ``d`` columns and never modify their inputs.
Convolutional per-channel statistics are obtained by reshaping to
``(K * spatial, channels)`` before calling in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fednorm.errors import DimensionError, InvalidStatisticsError, NonFiniteError, check_finite

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


def as_batch(batch, what: str = "batch") -> np.ndarray:
    """Validate and return ``batch`` as a finite 2-D float64 array."""
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{what} must be a non-empty (K, d) matrix, got shape {arr.shape}")
    check_finite(arr, what)
    return arr


def _vector(v, d: int, what: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape[0] != d:
        raise DimensionError(f"{what} has length {arr.shape[0]}, expected {d}")
    return arr


def _column_sums(arr: np.ndarray) -> np.ndarray:
    # fsum is exactly rounded, which keeps large-K oracle comparisons tight
    out = np.empty(arr.shape[1])
    for j, col in enumerate(arr.T):
        try:
            out[j] = math.fsum(col)
        except OverflowError:
            raise NonFiniteError(f"sum over column {j}", (j,)) from None
    return out


@dataclass(frozen=True)
class Moments:
    """Batch mean and biased (divisor K) variance, one entry per feature."""

    mean: np.ndarray
    var_biased: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class RunningStats:
    """Exponentially smoothed mean and variance maintained by BatchNorm.

    ``momentum`` is the weight given to the newest batch. The conventional
    starting point is mean 0 and variance 1, see :meth:`initial`.
    """

    mean: np.ndarray
    var: np.ndarray
    momentum: float = DEFAULT_MOMENTUM
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        var = np.asarray(self.var, dtype=np.float64).reshape(-1)
        if mean.shape != var.shape:
            raise DimensionError(f"running mean has length {mean.shape[0]}, variance {var.shape[0]}")
        if not 0.0 < self.momentum < 1.0:
            raise InvalidStatisticsError(f"momentum must lie in (0, 1), got {self.momentum}")
        if not self.eps > 0.0:
            raise InvalidStatisticsError(f"eps must be positive, got {self.eps}")
        check_finite(mean, "running mean")
        check_finite(var, "running variance")
        if (var < 0).any():
            j = int(np.argmax(var < 0))
            raise InvalidStatisticsError(f"running variance is negative at coordinate {j}: {var[j]}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def initial(cls, d: int, momentum: float = DEFAULT_MOMENTUM, eps: float = DEFAULT_EPS) -> RunningStats:
        return cls(np.zeros(d), np.ones(d), momentum, eps)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def replace(self, mean=None, var=None) -> RunningStats:
        return RunningStats(
            self.mean if mean is None else mean,
            self.var if var is None else var,
            self.momentum,
            self.eps,
        )


@dataclass(frozen=True)
class AffineParams:
    """Learnable per-feature scale and shift applied after whitening."""

    scale: np.ndarray
    shift: np.ndarray = field(default=None)

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        shift = np.zeros_like(scale) if self.shift is None else np.asarray(self.shift, dtype=np.float64).reshape(-1)
        if scale.shape != shift.shape:
            raise DimensionError("affine scale and shift lengths differ")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "shift", shift)

    @classmethod
    def identity(cls, d: int) -> AffineParams:
        return cls(np.ones(d), np.zeros(d))


def batch_moments(batch) -> Moments:
    """Per-feature mean and biased variance of a batch (two-pass formula)."""
    arr = as_batch(batch)
    k = arr.shape[0]
    mean = _column_sums(arr) / k
    # one refinement pass removes the rounding of the division (exact for constant columns)
    mean = mean + _column_sums(arr - mean) / k
    centered = arr - mean
    var = _column_sums(centered * centered) / k
    return Moments(mean, var, k)


def normalize(batch, mean, var, eps: float, affine: AffineParams) -> np.ndarray:
    """Whiten ``batch`` with the given statistics, then scale and shift."""
    arr = as_batch(batch)
    d = arr.shape[1]
    mean = _vector(mean, d, "mean")
    var = _vector(var, d, "variance")
    scale = _vector(affine.scale, d, "affine scale")
    shift = _vector(affine.shift, d, "affine shift")
    if (var < 0).any():
        j = int(np.argmax(var < 0))
        raise InvalidStatisticsError(f"variance is negative at coordinate {j}: {var[j]}")
    if eps < 0:
        raise InvalidStatisticsError(f"eps must be non-negative, got {eps}")
    return (arr - mean) / np.sqrt(var + eps) * scale + shift


def bessel(count: int) -> float:
    if count < 2:
        raise InvalidStatisticsError(f"Bessel correction needs a count of at least 2, got {count}")
    return count / (count - 1)


def update_running(stats: RunningStats, m: Moments, bessel_count: int) -> RunningStats:
    """One momentum step of the running statistics.

    ``bessel_count`` sets the unbiasing factor ``c / (c - 1)`` applied to the
    batch variance: the local batch size for plain BatchNorm, the total size
    of all clients' batches for federated clients.
    """
    factor = bessel(bessel_count)
    if m.dim != stats.dim:
        raise DimensionError(f"moments have dimension {m.dim}, running stats {stats.dim}")
    b = stats.momentum
    mean = (1.0 - b) * stats.mean + b * m.mean
    var = (1.0 - b) * stats.var + b * factor * m.var_biased
    return stats.replace(mean=mean, var=var)
