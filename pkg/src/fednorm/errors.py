"""Exception hierarchy.

Every error raised on purpose by the library derives from ``FedNormError`` so
callers (the CLI in particular) can map failures onto exit codes.
"""

from __future__ import annotations


class FedNormError(Exception):
    """Base class for all library errors."""


class DimensionError(FedNormError, ValueError):
    """Array shapes or vector lengths do not line up."""


class InvalidStatisticsError(FedNormError, ValueError):
    """A statistic violates its domain (negative variance, bad momentum, ...)."""


class NonFiniteError(FedNormError, ValueError):
    """NaN or infinity found where finite values are required."""

    def __init__(self, what: str, index: tuple[int, ...] | None = None):
        self.what = what
        self.index = index
        where = f" at index {index}" if index is not None else ""
        super().__init__(f"non-finite value in {what}{where}")


class ProtocolError(FedNormError, ValueError):
    """A normalization protocol was driven out of order or with bad inputs."""


class StaleCacheError(FedNormError, RuntimeError):
    """Backward was called with a cache produced from different parameters."""


class ConfigError(FedNormError, ValueError):
    """Invalid experiment or partition configuration."""


class NumericalFailure(FedNormError, ArithmeticError):
    """Training produced non-finite values and was aborted."""


def check_finite(array, what: str) -> None:
    """Raise ``NonFiniteError`` naming the first offending coordinate."""
    import numpy as np

    arr = np.asarray(array)
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(what, idx)
