"""DSGD orchestration over any normalization backend.

One round: every client samples a mini-batch, runs a train-mode forward and
backward pass, folds the gradient into its momentum buffer and sends the
buffer plus one statistics report per Norm layer.  The server aggregates
both (optionally with robust rules and after Byzantine corruption), takes
one SGD step and broadcasts the new parameters and statistics.

:func:`centralized_round` merges the clients' mini-batches and treats the
union as a single client, which is the centralized simulation used as the
reference in every comparison.  Both functions draw batches from the same
per-client samplers, so paired runs see identical data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fednorm.data import LabeledDataset, make_rng
from fednorm.errors import ConfigError, NonFiniteError, NumericalFailure
from fednorm.model import (
    Backend,
    ModelParams,
    Mode,
    Network,
    NormContext,
    PiecewiseLR,
    momentum_accumulate,
    nll_loss,
    sgd_update,
)
from fednorm.protocols import (
    ClientStatsReport,
    FixBnState,
    SharedState,
    fbn_server_aggregate,
    naive_server_aggregate,
    report_from_stats,
)
from fednorm.robust import MEAN, Aggregator, AttackSpec, robust_naive_aggregate, robust_stats_aggregate
from fednorm.stats import RunningStats


class BatchSampler:
    """Mini-batches without replacement, reshuffled every epoch.

    A trailing partial batch at the end of an epoch is skipped.  A client
    holding fewer points than the batch size (possible under a Dirichlet
    split) fills each batch from consecutive fresh permutations, so points
    repeat within a batch but every point is used equally often.
    """

    def __init__(self, size: int, batch: int, seed: int, client_id: int):
        if batch < 1 or size < 1:
            raise ConfigError(f"client {client_id}: batch size {batch} with {size} local points")
        self.size, self.batch = size, batch
        self._rng = make_rng(seed, 0xBA7C, client_id)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.size < self.batch:
            reps = -(-self.batch // self.size)
            return np.concatenate([self._rng.permutation(self.size) for _ in range(reps)])[: self.batch]
        if self._pos + self.batch > self._order.shape[0]:
            self._order = self._rng.permutation(self.size)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch]
        self._pos += self.batch
        return idx


@dataclass
class Client:
    data: LabeledDataset
    sampler: BatchSampler

    def sample(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.sampler.next()
        return self.data.features[idx], self.data.labels[idx]


def make_clients(datasets: Sequence[LabeledDataset], batch: int, seed: int) -> list[Client]:
    return [Client(d, BatchSampler(len(d), batch, seed, i)) for i, d in enumerate(datasets)]


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 500
    lr: PiecewiseLR | float = None
    momentum: float = 0.99
    # "client": each client folds its own gradient into a buffer and sends the
    # buffer; "server": clients send raw gradients, the server keeps the buffer
    momentum_site: str = "client"
    switch_round: int | None = None
    stats_agg: Aggregator = MEAN
    grad_agg: Aggregator = MEAN
    attack: AttackSpec = field(default_factory=AttackSpec)
    eval_every: int = 1

    def __post_init__(self):
        if self.lr is None:
            object.__setattr__(self, "lr", PiecewiseLR(total_rounds=self.rounds))
        if self.momentum_site not in ("client", "server"):
            raise ConfigError(f"momentum_site must be 'client' or 'server', got {self.momentum_site!r}")
        if self.rounds < 1:
            raise ConfigError(f"need at least one round, got {self.rounds}")

    @property
    def fixbn_switch(self) -> int:
        return self.rounds // 2 if self.switch_round is None else self.switch_round


@dataclass
class TrainState:
    params: ModelParams
    stats: dict[int, RunningStats]  # server-held statistics per Norm layer
    buffers: dict[int, np.ndarray] = field(default_factory=dict)
    frozen: dict[int, RunningStats] | None = None
    round: int = 0

    @classmethod
    def initial(cls, net: Network, seed: int) -> TrainState:
        return cls(net.init_params(seed), net.initial_stats())

    def eval_stats(self) -> dict[int, RunningStats]:
        return self.frozen if self.frozen is not None else self.stats


@dataclass
class RoundRecord:
    round: int
    loss: float
    accuracy: float | None
    wall_time: float = 0.0
    stats: dict[int, RunningStats] | None = None
    diverged: bool = False


def _backend(net: Network) -> Backend:
    backends = {net.layers[i].backend for i in net.norm_layers}
    if len(backends) > 1:
        raise ConfigError(f"mixed normalization backends {sorted(b.value for b in backends)}")
    return backends.pop() if backends else Backend.CENTRALIZED


def _aggregate_stats(
    backend: Backend,
    reports: list[ClientStatsReport],
    current: RunningStats,
    k: int,
    rule: Aggregator,
) -> RunningStats:
    if backend is Backend.FBN:
        shared = SharedState(current, len(reports), k)
        if rule.is_plain_mean:
            return fbn_server_aggregate(reports, shared)
        return robust_stats_aggregate(reports, rule, shared)
    if rule.is_plain_mean:
        return naive_server_aggregate(reports, current)
    return robust_naive_aggregate(reports, rule, current)


def _round(
    net: Network,
    state: TrainState,
    batches: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    attack: AttackSpec,
) -> tuple[TrainState, float]:
    t = state.round
    n = len(batches)
    backend = _backend(net)
    ks = {b[0].shape[0] for b in batches}
    if len(ks) != 1:
        raise ConfigError(f"round {t}: unequal client batch sizes {sorted(ks)}")
    k = ks.pop()

    # overflow on the way to divergence is detected and reported explicitly
    with np.errstate(over="ignore", invalid="ignore"):
        return _round_body(net, state, batches, cfg, attack, backend, n, k)


def _round_body(net, state, batches, cfg, attack, backend, n, k):
    t = state.round
    frozen = state.frozen
    fixbn = {}
    if backend is Backend.FIXBN:
        switch = cfg.fixbn_switch
        if t >= switch and frozen is None:
            frozen = dict(state.stats)
        fixbn = {i: FixBnState(t, switch, None if frozen is None else frozen[i]) for i in net.norm_layers}
    frozen_phase = frozen is not None

    sent, losses = [], []
    reports: dict[int, list[ClientStatsReport]] = {i: [] for i in net.norm_layers}
    buffers = dict(state.buffers)
    for cid, (x, y) in enumerate(batches):
        ctx = NormContext(state.stats, n_clients=n, client_id=cid, fixbn=fixbn)
        try:
            log_probs, cache = net.forward(state.params, x, Mode.TRAIN, ctx)
            loss, dlp = nll_loss(log_probs, y)
            grad = net.backward(state.params, cache, dlp)
        except NonFiniteError as exc:
            raise NumericalFailure(f"round {t}, client {cid}: {exc}") from exc
        if not np.isfinite(grad).all():
            raise NumericalFailure(f"round {t}, client {cid}: non-finite gradient")
        losses.append(loss)
        if cfg.momentum_site == "client" and cfg.momentum:
            buffers[cid] = momentum_accumulate(buffers.get(cid), grad, cfg.momentum)
            sent.append(buffers[cid])
        else:
            sent.append(grad)
        for i, out in cache.norm_out.items():
            reports[i].append(out if isinstance(out, ClientStatsReport) else report_from_stats(out, cid))

    vectors = attack.corrupt_vectors(np.stack(sent))
    step = cfg.grad_agg(vectors)
    if cfg.momentum_site == "server" and cfg.momentum:
        params, buffers[-1] = sgd_update(state.params, step, t, cfg.lr, cfg.momentum, buffers.get(-1))
    else:
        params, _ = sgd_update(state.params, step, t, cfg.lr)

    if frozen_phase:
        stats = dict(frozen)
    else:
        stats = {}
        try:
            for i, layer_reports in reports.items():
                layer_reports = attack.corrupt_reports(layer_reports)
                stats[i] = _aggregate_stats(backend, layer_reports, state.stats[i], k, cfg.stats_agg)
        except (NonFiniteError, FloatingPointError) as exc:
            raise NumericalFailure(f"round {t}: statistics aggregation failed: {exc}") from exc
    new_state = TrainState(params, stats, buffers, frozen, t + 1)
    return new_state, float(np.mean(losses))


def dsgd_round(net: Network, state: TrainState, clients: Sequence[Client], cfg: TrainConfig) -> tuple[TrainState, RoundRecord]:
    start = time.perf_counter()
    batches = [c.sample() for c in clients]
    new_state, loss = _round(net, state, batches, cfg, cfg.attack)
    return new_state, RoundRecord(state.round, loss, None, time.perf_counter() - start)


def centralized_round(
    net: Network, state: TrainState, clients: Sequence[Client], cfg: TrainConfig
) -> tuple[TrainState, RoundRecord]:
    """Merge every client's mini-batch and take one step on the union."""
    start = time.perf_counter()
    batches = [c.sample() for c in clients]
    union = (np.concatenate([b[0] for b in batches]), np.concatenate([b[1] for b in batches]))
    new_state, loss = _round(net, state, [union], cfg, AttackSpec())
    return new_state, RoundRecord(state.round, loss, None, time.perf_counter() - start)


def evaluate(net: Network, params: ModelParams, stats: dict[int, RunningStats], test: LabeledDataset) -> float:
    """Eval-mode accuracy with the given running statistics."""
    if len(test) == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    return float(np.mean(_correct(net, params, stats, test.features, test.labels)))


def _correct(net: Network, params: ModelParams, stats, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # a row that overflows makes no prediction and counts as wrong
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            log_probs, _ = net.forward(params, x, Mode.EVAL, NormContext(stats))
    except NonFiniteError:
        if x.shape[0] == 1:
            return np.zeros(1, dtype=bool)
        return np.concatenate([_correct(net, params, stats, x[i : i + 1], y[i : i + 1]) for i in range(x.shape[0])])
    valid = np.isfinite(log_probs).all(axis=1)
    pred = np.argmax(np.where(np.isfinite(log_probs), log_probs, -np.inf), axis=1)
    return valid & (pred == y)


def train(
    net: Network,
    clients: Sequence[Client],
    cfg: TrainConfig,
    test: LabeledDataset | None = None,
    seed: int = 0,
    centralized: bool = False,
    keep_stats: bool = False,
    halt_on_divergence: bool = False,
) -> tuple[TrainState, list[RoundRecord]]:
    """Run ``cfg.rounds`` rounds and return the final state and the records.

    With ``halt_on_divergence`` a :class:`NumericalFailure` does not
    propagate: the run stops and every remaining round is recorded as
    diverged, with accuracy 0 (a non-finite model makes no valid prediction).
    """
    step = centralized_round if centralized else dsgd_round
    if not centralized:
        cfg.attack.validate(len(clients))
        cfg.stats_agg.validate(len(clients))
        cfg.grad_agg.validate(len(clients))
    state = TrainState.initial(net, seed)
    records = []
    for t in range(cfg.rounds):
        try:
            state, rec = step(net, state, clients, cfg)
        except NumericalFailure:
            if not halt_on_divergence:
                raise
            records.extend(RoundRecord(r, float("nan"), 0.0, diverged=True) for r in range(t, cfg.rounds))
            break
        last = state.round == cfg.rounds
        if test is not None and (last or state.round % cfg.eval_every == 0):
            rec.accuracy = evaluate(net, state.params, state.eval_stats(), test)
        if keep_stats:
            rec.stats = dict(state.stats)
        records.append(rec)
    return state, records


def normalization_error(fed_points: Sequence, central_points: Sequence) -> float:
    """Mean over rounds of the mean Euclidean distance between paired points."""
    if len(fed_points) != len(central_points) or not fed_points:
        raise ConfigError(f"{len(fed_points)} federated rounds vs {len(central_points)} centralized rounds")
    per_round = []
    for t, (a, b) in enumerate(zip(fed_points, central_points)):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ConfigError(f"round {t}: point sets of shape {a.shape} and {b.shape}")
        per_round.append(np.mean(np.linalg.norm(a - b, axis=1)))
    return float(np.mean(per_round))
