"""Small feed-forward classifier with pluggable normalization layers.

The network is an ordered list of layers (:class:`Dense`, :class:`Norm`,
:class:`ReLU`, :class:`LogSoftmax`).  Parameters live in a
:class:`ModelParams` keyed by ``"<layer index>.<name>"`` so they can be
flattened for aggregation.  Forward and backward passes are written out by
hand; the normalization layers call into :mod:`fednorm.protocols`.

Checkpoint format (little-endian throughout)::

    magic    4 bytes  b"FNCK"
    version  uint16   (currently 1)
    p        uint64   number of parameters
    theta    p x float64, in ModelParams.flatten() order
    L        uint32   number of normalization layers
    L times:
      layer  uint32   layer index in the architecture
      d      uint32   feature count
      beta   float64  momentum
      eps    float64
      mean   d x float64
      var    d x float64
"""

from __future__ import annotations

import enum
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from fednorm.errors import DimensionError, NumericalFailure, ProtocolError, StaleCacheError, check_finite
from fednorm.protocols import (
    ClientStatsReport,
    FixBnState,
    Phase,
    SharedState,
    batchnorm_step,
    eval_normalize,
    fbn_client_step,
    fixbn_step,
)
from fednorm.stats import DEFAULT_EPS, DEFAULT_MOMENTUM, AffineParams, RunningStats, as_batch, batch_moments
from fednorm.data import make_rng


class Backend(str, enum.Enum):
    CENTRALIZED = "centralized"
    FBN = "fbn"
    NAIVE = "naive"
    FIXBN = "fixbn"


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Norm:
    dim: int
    backend: Backend = Backend.FBN
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class LogSoftmax:
    pass


Layer = Union[Dense, Norm, ReLU, LogSoftmax]


def toy_architecture(
    in_dim: int = 2, hidden: int = 32, classes: int = 10, backend: Backend | str = Backend.FBN, **norm_kwargs
) -> list[Layer]:
    """Dense -> Norm -> ReLU -> Dense -> LogSoftmax."""
    return [
        Dense(in_dim, hidden),
        Norm(hidden, Backend(backend), **norm_kwargs),
        ReLU(),
        Dense(hidden, classes),
        LogSoftmax(),
    ]


@dataclass
class ModelParams:
    """Named parameter arrays with a stable flat-vector view."""

    arrays: dict[str, np.ndarray]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    def unflatten(self, flat) -> ModelParams:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise DimensionError(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        out, pos = {}, 0
        for key, a in self.arrays.items():
            out[key] = flat[pos : pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return ModelParams(out)

    def copy(self) -> ModelParams:
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def affine(self, layer: int) -> AffineParams:
        return AffineParams(self.arrays[f"{layer}.scale"], self.arrays[f"{layer}.shift"])

    def fingerprint(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        for key, a in self.arrays.items():
            h.update(key.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.digest()


@dataclass
class NormContext:
    """What the normalization layers need for one forward pass.

    ``stats`` maps each Norm layer index to the statistics the layer reads:
    the shared statistics for FBN, the client's local running statistics for
    Naive/centralized/FixBN, or the final statistics in evaluation mode.
    """

    stats: dict[int, RunningStats]
    n_clients: int = 1
    client_id: int = 0
    fixbn: dict[int, FixBnState] = field(default_factory=dict)


@dataclass
class ForwardCache:
    fingerprint: bytes
    inputs: list[np.ndarray]
    norm: dict[int, tuple[str, np.ndarray, np.ndarray]]  # layer -> (kind, x_hat, inv_std)
    log_probs: np.ndarray
    # per Norm layer: the FBN report or the locally updated running stats
    norm_out: dict[int, ClientStatsReport | RunningStats]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class Network:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        self._validate()

    def _validate(self) -> None:
        if not self.layers or not isinstance(self.layers[-1], LogSoftmax):
            raise DimensionError("architecture must end with exactly one LogSoftmax")
        if sum(isinstance(l, LogSoftmax) for l in self.layers) != 1:
            raise DimensionError("architecture must end with exactly one LogSoftmax")
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if width is not None and layer.in_dim != width:
                    raise DimensionError(f"layer {i}: Dense expects {layer.in_dim} inputs, previous width {width}")
                width = layer.out_dim
            elif isinstance(layer, Norm):
                if width is not None and layer.dim != width:
                    raise DimensionError(f"layer {i}: Norm of width {layer.dim} after width {width}")
                width = layer.dim
        first = self.layers[0]
        self.in_dim = first.in_dim if isinstance(first, Dense) else first.dim
        self.out_dim = width

    @property
    def norm_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Norm)]

    def init_params(self, seed: int) -> ModelParams:
        """Uniform Glorot weights, zero biases, identity affine maps."""
        rng = make_rng(seed, 0xA11)
        arrays: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                limit = math.sqrt(6.0 / (layer.in_dim + layer.out_dim))
                arrays[f"{i}.weight"] = rng.uniform(-limit, limit, size=(layer.in_dim, layer.out_dim))
                arrays[f"{i}.bias"] = np.zeros(layer.out_dim)
            elif isinstance(layer, Norm):
                arrays[f"{i}.scale"] = np.ones(layer.dim)
                arrays[f"{i}.shift"] = np.zeros(layer.dim)
        return ModelParams(arrays)

    def initial_stats(self) -> dict[int, RunningStats]:
        return {
            i: RunningStats.initial(l.dim, l.momentum, l.eps) for i, l in enumerate(self.layers) if isinstance(l, Norm)
        }

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _norm_forward(self, i: int, layer: Norm, u: np.ndarray, params: ModelParams, mode: Mode, ctx: NormContext):
        affine = params.affine(i)
        if i not in ctx.stats:
            raise ProtocolError(f"no statistics supplied for Norm layer {i}")
        stats = ctx.stats[i]
        if mode is Mode.EVAL:
            return eval_normalize(u, stats, affine), "fixed", stats.mean, stats.var, stats.eps, None
        backend = layer.backend
        if backend is Backend.FBN:
            shared = SharedState(stats, ctx.n_clients, u.shape[0])
            out, report = fbn_client_step(u, shared, affine, ctx.client_id)
            return out, "fixed", stats.mean, stats.var, stats.eps, report
        if backend is Backend.FIXBN:
            state = ctx.fixbn.get(i)
            if state is None:
                raise ProtocolError(f"FixBN layer {i} needs a FixBnState in the context")
            out, local = fixbn_step(u, state, stats, affine)
            if state.phase is Phase.FROZEN:
                fs = state.frozen_stats
                return out, "fixed", fs.mean, fs.var, fs.eps, local
        else:
            out, local = batchnorm_step(u, stats, affine)
        m = batch_moments(u)
        return out, "batch", m.mean, m.var_biased, stats.eps, local

    def forward(self, params: ModelParams, batch, mode: Mode | str = Mode.TRAIN, ctx: NormContext | None = None):
        """Return ``(log_probs, cache)``; the cache is ``None`` in eval mode."""
        mode = Mode(mode)
        x = as_batch(batch)
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"input has {x.shape[1]} features, network expects {self.in_dim}")
        inputs, norm_cache, norm_out = [], {}, {}
        for i, layer in enumerate(self.layers):
            inputs.append(x)
            if isinstance(layer, Dense):
                x = x @ params.arrays[f"{i}.weight"] + params.arrays[f"{i}.bias"]
            elif isinstance(layer, Norm):
                if ctx is None:
                    raise ProtocolError("Norm layers need a NormContext")
                x, kind, mean, var, eps, extra = self._norm_forward(i, layer, x, params, mode, ctx)
                inv_std = 1.0 / np.sqrt(var + eps)
                norm_cache[i] = (kind, (inputs[-1] - mean) * inv_std, inv_std)
                if extra is not None:
                    norm_out[i] = extra
            elif isinstance(layer, ReLU):
                x = np.maximum(x, 0.0)
            else:
                x = _log_softmax(x)
        if mode is Mode.EVAL:
            return x, None
        return x, ForwardCache(params.fingerprint(), inputs, norm_cache, x, norm_out)

    def predict(self, params: ModelParams, batch, stats: dict[int, RunningStats]) -> np.ndarray:
        log_probs, _ = self.forward(params, batch, Mode.EVAL, NormContext(stats))
        return np.argmax(log_probs, axis=1)

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------

    def backward(self, params: ModelParams, cache: ForwardCache, grad_logprobs) -> np.ndarray:
        """Gradient of the loss w.r.t. every parameter, as a flat vector."""
        if cache is None:
            raise ProtocolError("backward needs a cache from a train-mode forward pass")
        if cache.fingerprint != params.fingerprint():
            raise StaleCacheError("parameters changed since the forward pass that produced this cache")
        g = np.asarray(grad_logprobs, dtype=np.float64)
        if g.shape != cache.log_probs.shape:
            raise DimensionError(f"upstream gradient {g.shape} does not match outputs {cache.log_probs.shape}")
        grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            x_in = cache.inputs[i]
            if isinstance(layer, LogSoftmax):
                probs = np.exp(cache.log_probs)
                g = g - probs * g.sum(axis=1, keepdims=True)
            elif isinstance(layer, ReLU):
                g = g * (x_in > 0)
            elif isinstance(layer, Dense):
                grads[f"{i}.weight"] = x_in.T @ g
                grads[f"{i}.bias"] = g.sum(axis=0)
                g = g @ params.arrays[f"{i}.weight"].T
            else:
                kind, x_hat, inv_std = cache.norm[i]
                scale = params.arrays[f"{i}.scale"]
                grads[f"{i}.scale"] = (g * x_hat).sum(axis=0)
                grads[f"{i}.shift"] = g.sum(axis=0)
                dxhat = g * scale
                if kind == "fixed":
                    g = dxhat * inv_std
                else:
                    k = g.shape[0]
                    g = inv_std / k * (k * dxhat - dxhat.sum(axis=0) - x_hat * (dxhat * x_hat).sum(axis=0))
        return np.concatenate([grads[k].reshape(-1) for k in params.arrays])


def nll_loss(log_probs, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``log_probs``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = lp.shape
    if y.shape[0] != b:
        raise DimensionError(f"{y.shape[0]} labels for {b} rows")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise DimensionError(f"labels must lie in [0, {c})")
    rows = np.arange(b)
    loss = -float(np.sum(lp[rows, y])) / b
    grad = np.zeros_like(lp)
    grad[rows, y] = -1.0 / b
    return loss, grad


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseLR:
    """Constant learning rate on equal consecutive slices of ``total_rounds``."""

    values: tuple[float, ...] = (0.1, 0.05, 0.033)
    total_rounds: int = 3000

    def __call__(self, t: int) -> float:
        k = len(self.values)
        return self.values[min(k - 1, t * k // max(self.total_rounds, 1))]


def momentum_accumulate(buffer: np.ndarray | None, grad: np.ndarray, momentum: float) -> np.ndarray:
    """``v <- momentum * v + grad`` (``v`` starts at zero)."""
    if buffer is None:
        return np.array(grad, dtype=np.float64)
    return momentum * buffer + grad


def sgd_update(
    params: ModelParams,
    grad,
    t: int,
    lr=PiecewiseLR(),
    momentum: float = 0.0,
    buffer: np.ndarray | None = None,
) -> tuple[ModelParams, np.ndarray]:
    """One heavy-ball step, ``theta <- theta - lr(t) * (momentum * v + grad)``.

    Returns the new parameters and the new momentum buffer.  ``lr`` is a
    float or a schedule called with the round index.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.size,):
        raise DimensionError(f"gradient has shape {grad.shape}, expected ({params.size},)")
    if not np.isfinite(grad).all():
        j = int(np.argmax(~np.isfinite(grad)))
        raise NumericalFailure(f"round {t}: non-finite gradient at coordinate {j}")
    v = momentum_accumulate(buffer, grad, momentum) if momentum else grad
    eta = lr(t) if callable(lr) else float(lr)
    with np.errstate(over="ignore", invalid="ignore"):
        theta = params.flatten() - eta * v
    if not np.isfinite(theta).all():
        raise NumericalFailure(f"round {t}: parameters overflowed after the update")
    return params.unflatten(theta), v


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_MAGIC = b"FNCK"
_VERSION = 1


def save_checkpoint(path, params: ModelParams, stats: dict[int, RunningStats]) -> None:
    theta = params.flatten()
    chunks = [_MAGIC, struct.pack("<HQ", _VERSION, theta.size), theta.astype("<f8").tobytes()]
    chunks.append(struct.pack("<I", len(stats)))
    for layer in sorted(stats):
        s = stats[layer]
        chunks.append(struct.pack("<IIdd", layer, s.dim, s.momentum, s.eps))
        chunks.append(s.mean.astype("<f8").tobytes())
        chunks.append(s.var.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, template: ModelParams) -> tuple[ModelParams, dict[int, RunningStats]]:
    """Read a checkpoint; ``template`` supplies parameter names and shapes."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ProtocolError(f"{path}: not a checkpoint file")
    version, p = struct.unpack_from("<HQ", raw, 4)
    if version != _VERSION:
        raise ProtocolError(f"{path}: unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<HQ")
    theta = np.frombuffer(raw, dtype="<f8", count=p, offset=pos).astype(np.float64)
    pos += 8 * p
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    stats = {}
    for _ in range(count):
        layer, d, beta, eps = struct.unpack_from("<IIdd", raw, pos)
        pos += struct.calcsize("<IIdd")
        mean = np.frombuffer(raw, dtype="<f8", count=d, offset=pos).astype(np.float64)
        var = np.frombuffer(raw, dtype="<f8", count=d, offset=pos + 8 * d).astype(np.float64)
        pos += 16 * d
        stats[layer] = RunningStats(mean, var, beta, eps)
    check_finite(theta, "checkpoint parameters")
    return template.unflatten(theta), stats
