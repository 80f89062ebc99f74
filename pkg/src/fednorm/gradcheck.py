"""Central finite differences for checking hand-written gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_gradient(fn: Callable[[np.ndarray], float], x, step: float = 1e-4) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        grad.flat[i] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Coordinate-wise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
