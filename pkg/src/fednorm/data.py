"""Synthetic datasets and heterogeneity-controlled partitioning.

Randomness
----------
Every random draw goes through :func:`make_rng`, which builds a NumPy
``Generator`` on the counter-based Philox-4x64 bit generator seeded from a
``SeedSequence(seed, spawn_key=keys)``.  Distinct ``keys`` tuples give
independent streams (this is how per-round and per-client streams are
split), and the same ``(seed, keys)`` always reproduces the same draws.

CSV layout
----------
:func:`save_csv` writes a header ``x0,x1,...,x{d-1},label`` followed by one
row per point: the feature columns in order, then the integer label.
Floats are written with ``repr`` so a load/save round trip is exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fednorm.errors import ConfigError, DimensionError

RING_RADIUS = 10.0


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,) ints in [0, class_count)
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DimensionError(f"features {x.shape} do not match {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ConfigError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    @staticmethod
    def concat(parts: Sequence[LabeledDataset]) -> LabeledDataset:
        return LabeledDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            max(p.class_count for p in parts),
        )


# --------------------------------------------------------------------------
# Gaussian ring
# --------------------------------------------------------------------------


def ring_means(count: int, radius: float = RING_RADIUS) -> np.ndarray:
    """Centres ``radius * (cos(2 pi i / count), sin(2 pi i / count))``."""
    angles = 2.0 * np.pi * np.arange(count) / count
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _check_s2(s2: float) -> None:
    if not s2 > 0:
        raise ConfigError(f"variance s2 must be positive, got {s2}")


def gaussian_ring(n: int, m: int, s2: float = 1.0, seed: int = 0, radius: float = RING_RADIUS) -> list[LabeledDataset]:
    """``n`` single-class clients; client ``i`` holds ``m`` draws of N(mu_i, s2 I)."""
    _check_s2(s2)
    if n < 1 or m < 1:
        raise ConfigError(f"need n >= 1 and m >= 1, got n={n}, m={m}")
    mus = ring_means(n, radius)
    out = []
    for i in range(n):
        rng = make_rng(seed, i)
        pts = mus[i] + math.sqrt(s2) * rng.standard_normal((m, 2))
        out.append(LabeledDataset(pts, np.full(m, i), n))
    return out


def ring_classification(per_class: int, classes: int = 10, s2: float = 1.0, seed: int = 0) -> LabeledDataset:
    """Pooled ring dataset with ``per_class`` points of each class."""
    return LabeledDataset.concat(gaussian_ring(classes, per_class, s2, seed))


def heterogeneity_mixture_sampler(
    gamma: float,
    client: int,
    batch: int,
    seed: int,
    components: int = 10,
    s2: float = 1.0,
    radius: float = RING_RADIUS,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch`` labelled points for one client of the streaming ring.

    Each point comes from the client's own component with probability
    ``1 - gamma`` and from a uniformly chosen component otherwise.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    _check_s2(s2)
    if not 0 <= client < components:
        raise ConfigError(f"client {client} outside 0..{components - 1}")
    rng = make_rng(seed, client)
    mixed = rng.random(batch) < gamma
    labels = np.where(mixed, rng.integers(0, components, size=batch), client)
    pts = ring_means(components, radius)[labels] + math.sqrt(s2) * rng.standard_normal((batch, 2))
    return pts, labels


# --------------------------------------------------------------------------
# partitioners
# --------------------------------------------------------------------------


def gamma_split_indices(labels, gamma: float, n: int, seed: int) -> list[np.ndarray]:
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    if n < 1:
        raise ConfigError(f"need at least one client, got n={n}")
    labels = np.asarray(labels)
    total = labels.shape[0]
    rng = make_rng(seed)
    per_client = total // n
    if per_client == 0:
        raise ConfigError(f"{total} points cannot be split over {n} clients")
    kept = np.arange(total)
    if total % n:
        kept = np.sort(rng.permutation(total)[: per_client * n])

    homo_per_client = int(round(gamma * per_client))
    perm = rng.permutation(kept)
    homo = perm[: homo_per_client * n]
    hetero = np.sort(perm[homo_per_client * n :])
    # stable sort on label keeps original index order within a label
    hetero = hetero[np.argsort(labels[hetero], kind="stable")]
    hetero_per_client = per_client - homo_per_client
    homo = rng.permutation(homo)
    parts = []
    for i in range(n):
        chunk = hetero[i * hetero_per_client : (i + 1) * hetero_per_client]
        draw = homo[i * homo_per_client : (i + 1) * homo_per_client]
        parts.append(np.concatenate([chunk, draw]))
    return parts


def gamma_split(data: LabeledDataset, gamma: float, n: int, seed: int) -> list[LabeledDataset]:
    """Mix a uniform split of a ``gamma`` fraction with a label-sorted split of the rest.

    ``gamma = 1`` gives iid clients, ``gamma = 0`` gives each client one
    contiguous chunk of the label-sorted data.  A remainder that does not
    divide by ``n`` is dropped at random.
    """
    return [data.subset(idx) for idx in gamma_split_indices(data.labels, gamma, n, seed)]


def dirichlet_split_indices(labels, alpha: float, n: int, seed: int, max_retries: int = 100) -> list[np.ndarray]:
    if not alpha > 0:
        raise ConfigError(f"Dirichlet concentration must be positive, got {alpha}")
    if n < 1:
        raise ConfigError(f"need at least one client, got n={n}")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    for attempt in range(max_retries):
        rng = make_rng(seed, attempt)
        buckets: list[list[np.ndarray]] = [[] for _ in range(n)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            p = rng.dirichlet(np.full(n, alpha))
            counts = rng.multinomial(idx.shape[0], p)
            for i, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                buckets[i].append(part)
        parts = [np.sort(np.concatenate(b)) for b in buckets]
        if all(p.shape[0] > 0 for p in parts):
            return parts
    raise ConfigError(f"Dirichlet split left a client empty after {max_retries} draws (alpha={alpha}, n={n})")


def dirichlet_split(data: LabeledDataset, alpha: float, n: int, seed: int) -> list[LabeledDataset]:
    """Per class, spread points over clients with Dirichlet(alpha) proportions."""
    return [data.subset(idx) for idx in dirichlet_split_indices(data.labels, alpha, n, seed)]


def total_variation(hist, reference) -> float:
    p = np.asarray(hist, dtype=np.float64)
    q = np.asarray(reference, dtype=np.float64)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def save_csv(data: LabeledDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(data.dim)] + ["label"])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_csv(path, class_count: int | None = None) -> LabeledDataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "label":
        raise ConfigError(f"{path}: last column must be 'label'")
    d = len(header) - 1
    x = np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64).reshape(len(body), d)
    y = np.array([int(r[d]) for r in body], dtype=np.int64)
    if class_count is None:
        class_count = int(y.max()) + 1 if y.size else 1
    return LabeledDataset(x, y, class_count)
