"""Experiment families, their configuration and their CSV outputs.

Config file grammar
-------------------
One ``key = value`` pair per line.  ``#`` starts a comment, blank lines are
ignored, keys are the :class:`ExperimentConfig` field names and list values
are comma separated (``gamma = 0, 0.1, 0.5, 1``).  The resolved config of
each run is echoed in the same grammar to ``config.txt`` in the output
directory.

Outputs (all comma separated, one header line)
----------------------------------------------
``separability.csv``
    round, algo, client, label, x_raw, y_raw, x_norm, y_norm
``norm_error.csv``
    level, algo, error
``toy_training.csv``
    algo, partition, level, round, loss, accuracy
``robustness.csv``
    algo, scenario, attack, agg, partition, level, round, loss, accuracy
``*_summary.csv``
    one line per run: final accuracy, accuracy at round T/4, divergence round
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fednorm.data import (
    LabeledDataset,
    dirichlet_split,
    gamma_split,
    heterogeneity_mixture_sampler,
    make_rng,
    ring_classification,
)
from fednorm.errors import ConfigError
from fednorm.model import Network, PiecewiseLR, toy_architecture
from fednorm.protocols import (
    SharedState,
    batchnorm_step,
    fbn_client_step,
    fbn_server_aggregate,
    fixbn_step,
    FixBnState,
    naive_server_aggregate,
    report_from_stats,
)
from fednorm.robust import Aggregator, AttackKind, AttackSpec, Target
from fednorm.stats import AffineParams, RunningStats
from fednorm.training import RoundRecord, TrainConfig, make_clients, normalization_error, train


class Experiment(str, enum.Enum):
    SEPARABILITY = "separability"
    NORM_ERROR = "norm_error"
    TOY_TRAINING = "toy_training"
    ROBUSTNESS = "robustness"


ALL_ALGOS = ("centralized", "fbn", "naive", "fixbn")

_DEFAULT_ROUNDS = {
    Experiment.SEPARABILITY: 100,
    Experiment.NORM_ERROR: 100,
    Experiment.TOY_TRAINING: 500,
    Experiment.ROBUSTNESS: 500,
}
_DEFAULT_GAMMA = {
    Experiment.SEPARABILITY: (0.0,),
    Experiment.NORM_ERROR: (0.0, 0.1, 0.5, 1.0),
    Experiment.TOY_TRAINING: (0.0, 0.01, 0.1, 1.0),
    Experiment.ROBUSTNESS: (0.0,),
}
_DEFAULT_ALGOS = {
    Experiment.SEPARABILITY: ALL_ALGOS,
    Experiment.NORM_ERROR: ("fbn", "fixbn", "naive"),
    Experiment.TOY_TRAINING: ALL_ALGOS,
    Experiment.ROBUSTNESS: ("fbn", "naive"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: Experiment = Experiment.TOY_TRAINING
    algo: tuple[str, ...] = ()
    gamma: tuple[float, ...] = ()
    dirichlet: tuple[float, ...] = ()
    attack: str = "sf"
    targets: str = "stats"
    foe_eps: float = 1.0
    alie_z: float | None = None
    agg: tuple[str, ...] = ("nnm+median", "nnm+trimmed_mean")
    grad_agg: str = "mean"
    f: int = 3
    n: int = 10
    batch: int = 30
    rounds: int | None = None
    beta: float = 0.1
    eps: float = 1e-5
    lr: tuple[float, ...] = (0.1, 0.05, 0.033)
    momentum: float = 0.99
    momentum_site: str = "client"
    switch_round: int | None = None
    hidden: int = 32
    classes: int = 10
    s2: float = 1.0
    per_class: int = 200
    test_per_class: int = 100
    seed: int = 0
    out: str = "results"
    # "record": a diverged run is logged with accuracy 0; "abort": stop with exit code 3
    on_divergence: str = "record"

    def resolved(self) -> ExperimentConfig:
        """Fill experiment-dependent defaults and validate cross-field rules."""
        exp = Experiment(self.experiment)
        cfg = replace(
            self,
            experiment=exp,
            algo=tuple(self.algo) or _DEFAULT_ALGOS[exp],
            gamma=tuple(self.gamma) if (self.gamma or self.dirichlet) else _DEFAULT_GAMMA[exp],
            rounds=self.rounds or _DEFAULT_ROUNDS[exp],
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for a in self.algo:
            if a not in ALL_ALGOS:
                raise ConfigError(f"unknown algo {a!r}; choose from {', '.join(ALL_ALGOS)}")
        if self.gamma and self.dirichlet:
            raise ConfigError("give either gamma levels or dirichlet concentrations, not both")
        for g in self.gamma:
            if not 0.0 <= g <= 1.0:
                raise ConfigError(f"gamma must lie in [0, 1], got {g}")
        for a in self.dirichlet:
            if not a > 0:
                raise ConfigError(f"dirichlet concentration must be positive, got {a}")
        if self.experiment in (Experiment.SEPARABILITY, Experiment.NORM_ERROR) and self.dirichlet:
            raise ConfigError(f"{self.experiment.value} uses the streaming ring; use gamma levels")
        if self.n < 1:
            raise ConfigError(f"n must be at least 1, got {self.n}")
        if self.batch < 2:
            raise ConfigError(f"batch must be at least 2, got {self.batch}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigError(f"rounds must be positive, got {self.rounds}")
        if self.experiment is Experiment.ROBUSTNESS:
            try:
                kind, _ = AttackKind(self.attack), Target(self.targets)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if kind is not AttackKind.NONE and self.f == 0:
                raise ConfigError(f"attack {kind.value!r} needs at least one Byzantine client (f >= 1)")
            if not 0 <= self.f or not 2 * self.f < self.n:
                raise ConfigError(f"need 0 <= f < n/2, got f={self.f}, n={self.n}")
            for name in self.agg:
                Aggregator.parse(name, self.f).validate(self.n)
        if self.experiment is Experiment.SEPARABILITY and self.n > self.classes:
            raise ConfigError("the ring stream has one component per client: need n <= classes")
        Aggregator.parse(self.grad_agg, self.f)
        if self.on_divergence not in ("record", "abort"):
            raise ConfigError(f"on_divergence must be 'record' or 'abort', got {self.on_divergence!r}")
        if self.momentum_site not in ("client", "server"):
            raise ConfigError(f"momentum_site must be 'client' or 'server', got {self.momentum_site!r}")

    # ------------------------------------------------------------------
    # file grammar
    # ------------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for fld in fields(self):
            value = getattr(self, fld.name)
            if isinstance(value, enum.Enum):
                value = value.value
            if isinstance(value, tuple):
                value = ", ".join(_fmt(v) for v in value)
            elif value is None:
                value = ""
            else:
                value = _fmt(value)
            lines.append(f"{fld.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> ExperimentConfig:
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(key, raw)
        return cls(**kwargs)


_TUPLE_FLOAT = {"gamma", "dirichlet", "lr"}
_TUPLE_STR = {"algo", "agg"}
_INT = {"f", "n", "batch", "rounds", "switch_round", "hidden", "classes", "per_class", "test_per_class", "seed"}
_FLOAT = {"foe_eps", "alie_z", "beta", "eps", "momentum", "s2"}
_OPTIONAL = {"rounds", "switch_round", "alie_z"}


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key: str, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key in _OPTIONAL and text in ("", "none", "auto"):
            return None
        if key in _TUPLE_FLOAT:
            return tuple(float(t) for t in text.split(",") if t.strip())
        if key in _TUPLE_STR:
            return tuple(t.strip().lower() for t in text.split(",") if t.strip())
        if key in _INT:
            return int(text)
        if key in _FLOAT:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    if key == "experiment":
        try:
            return Experiment(text.lower())
        except ValueError:
            raise ConfigError(f"unknown experiment {text!r}") from None
    return text.lower() if key != "out" else text


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


# --------------------------------------------------------------------------
# CSV helpers
# --------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


# --------------------------------------------------------------------------
# streaming normalization (separability and normalization error)
# --------------------------------------------------------------------------


def ring_stream(cfg: ExperimentConfig, gamma: float) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    """Fresh per-client batches for every round of the streaming ring."""
    stream = []
    for t in range(cfg.rounds):
        seed = int(make_rng(cfg.seed, 0x5EED, t).integers(2**63))
        stream.append(
            [
                heterogeneity_mixture_sampler(gamma, i, cfg.batch, seed, components=cfg.classes, s2=cfg.s2)
                for i in range(cfg.n)
            ]
        )
    return stream


def normalize_stream(stream, algo: str, beta: float, eps: float, switch_round: int | None = None) -> list[np.ndarray]:
    """Apply one normalization protocol to raw 2-D points, round by round.

    Returns, per round, the normalized points of all clients stacked in
    client order.  The affine map is the identity.
    """
    d = stream[0][0][0].shape[1]
    affine = AffineParams.identity(d)
    stats = RunningStats.initial(d, beta, eps)
    n = len(stream[0])
    k = stream[0][0][0].shape[0]
    switch = len(stream) // 2 if switch_round is None else switch_round
    frozen = None
    out = []
    for t, batches in enumerate(stream):
        if algo == "centralized":
            union = np.concatenate([b[0] for b in batches])
            normed, stats = batchnorm_step(union, stats, affine)
            out.append(normed)
            continue
        if algo == "fbn":
            shared = SharedState(stats, n, k, t)
            results = [fbn_client_step(b[0], shared, affine, i) for i, b in enumerate(batches)]
            stats = fbn_server_aggregate([r[1] for r in results], shared)
        elif algo in ("naive", "fixbn"):
            if algo == "fixbn" and t >= switch and frozen is None:
                frozen = stats
            state = FixBnState(t, switch if algo == "fixbn" else len(stream) + 1, frozen)
            results = [fixbn_step(b[0], state, stats, affine) for b in batches]
            if frozen is None:
                stats = naive_server_aggregate([report_from_stats(r[1], i) for i, r in enumerate(results)], stats)
        else:
            raise ConfigError(f"unknown algo {algo!r}")
        out.append(np.concatenate([r[0] for r in results]))
    return out


def run_separability(cfg: ExperimentConfig) -> Path:
    cfg = cfg.resolved()
    out = _prepare_out(cfg)
    gamma = cfg.gamma[0]
    stream = ring_stream(cfg, gamma)
    last = stream[-1]
    raw = np.concatenate([b[0] for b in last])
    labels = np.concatenate([b[1] for b in last])
    clients = np.repeat(np.arange(cfg.n), cfg.batch)
    rows = []
    for algo in cfg.algo:
        normed = normalize_stream(stream, algo, cfg.beta, cfg.eps, cfg.switch_round)[-1]
        for j in range(raw.shape[0]):
            rows.append((cfg.rounds, algo, int(clients[j]), int(labels[j]), raw[j, 0], raw[j, 1], normed[j, 0], normed[j, 1]))
    path = out / "separability.csv"
    write_csv(path, ("round", "algo", "client", "label", "x_raw", "y_raw", "x_norm", "y_norm"), rows)
    return path


def norm_errors(cfg: ExperimentConfig) -> dict[tuple[float, str], float]:
    """Normalization error of every (level, algo) against the centralized run."""
    cfg = cfg.resolved()
    result = {}
    for gamma in cfg.gamma:
        stream = ring_stream(cfg, gamma)
        central = normalize_stream(stream, "centralized", cfg.beta, cfg.eps)
        for algo in cfg.algo:
            fed = normalize_stream(stream, algo, cfg.beta, cfg.eps, cfg.switch_round)
            result[(gamma, algo)] = normalization_error(fed, central)
    return result


def run_norm_error(cfg: ExperimentConfig) -> Path:
    cfg = cfg.resolved()
    out = _prepare_out(cfg)
    errors = norm_errors(cfg)
    path = out / "norm_error.csv"
    write_csv(path, ("level", "algo", "error"), [(g, a, e) for (g, a), e in errors.items()])
    return path


# --------------------------------------------------------------------------
# training experiments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RunSummary:
    algo: str
    partition: str
    level: float
    final_accuracy: float
    quarter_accuracy: float
    diverged_round: int | None
    scenario: str = ""
    attack: str = ""
    agg: str = ""


def _partitions(cfg: ExperimentConfig) -> list[tuple[str, float]]:
    if cfg.dirichlet:
        return [("dirichlet", a) for a in cfg.dirichlet]
    return [("gamma", g) for g in cfg.gamma]


def _datasets(cfg: ExperimentConfig, kind: str, level: float) -> tuple[list[LabeledDataset], LabeledDataset]:
    train_ds = ring_classification(cfg.per_class, cfg.classes, cfg.s2, seed=cfg.seed)
    test = ring_classification(cfg.test_per_class, cfg.classes, cfg.s2, seed=cfg.seed + 1)
    split = gamma_split if kind == "gamma" else dirichlet_split
    return split(train_ds, level, cfg.n, cfg.seed + 2), test


def _train_config(cfg: ExperimentConfig, **overrides) -> TrainConfig:
    base = dict(
        rounds=cfg.rounds,
        lr=PiecewiseLR(tuple(cfg.lr), cfg.rounds),
        momentum=cfg.momentum,
        momentum_site=cfg.momentum_site,
        switch_round=cfg.switch_round,
        grad_agg=Aggregator.parse(cfg.grad_agg, cfg.f),
    )
    base.update(overrides)
    return TrainConfig(**base)


def train_run(
    cfg: ExperimentConfig, algo: str, kind: str, level: float, tcfg: TrainConfig | None = None
) -> tuple[list[RoundRecord], RunSummary]:
    """Train one algorithm on one partition; the centralized run uses the same batches."""
    parts, test = _datasets(cfg, kind, level)
    net = Network(toy_architecture(2, cfg.hidden, cfg.classes, algo, eps=cfg.eps, momentum=cfg.beta))
    clients = make_clients(parts, cfg.batch, cfg.seed + 3)
    tcfg = tcfg or _train_config(cfg)
    _, records = train(
        net,
        clients,
        tcfg,
        test,
        seed=cfg.seed + 4,
        centralized=(algo == "centralized"),
        halt_on_divergence=(cfg.on_divergence == "record"),
    )
    diverged = next((r.round for r in records if r.diverged), None)
    quarter = records[max(cfg.rounds // 4 - 1, 0)].accuracy
    return records, RunSummary(algo, kind, level, records[-1].accuracy, quarter, diverged)


_SUMMARY_HEADER = ("algo", "scenario", "attack", "agg", "partition", "level", "final_accuracy", "quarter_accuracy", "diverged_round")


def _summary_row(s: RunSummary):
    return (s.algo, s.scenario, s.attack, s.agg, s.partition, s.level, s.final_accuracy, s.quarter_accuracy, s.diverged_round)


def toy_training(cfg: ExperimentConfig) -> tuple[list[tuple], list[RunSummary]]:
    cfg = cfg.resolved()
    rows, summaries = [], []
    for kind, level in _partitions(cfg):
        for algo in cfg.algo:
            records, summary = train_run(cfg, algo, kind, level)
            rows.extend((algo, kind, level, r.round, r.loss, r.accuracy) for r in records)
            summaries.append(summary)
    return rows, summaries


def run_toy_training(cfg: ExperimentConfig) -> Path:
    cfg = cfg.resolved()
    out = _prepare_out(cfg)
    rows, summaries = toy_training(cfg)
    path = out / "toy_training.csv"
    write_csv(path, ("algo", "partition", "level", "round", "loss", "accuracy"), rows)
    write_csv(out / "toy_training_summary.csv", _SUMMARY_HEADER, [_summary_row(s) for s in summaries])
    return path


def robustness(cfg: ExperimentConfig) -> tuple[list[tuple], list[RunSummary]]:
    """No-attack / no-defense / defense triple for every algo, level and defense."""
    cfg = cfg.resolved()
    rows, summaries = [], []
    attack = AttackSpec.last_clients(
        cfg.attack, cfg.n, cfg.f, targets=cfg.targets, eps=cfg.foe_eps, z=cfg.alie_z
    )
    mean = Aggregator.parse("mean", cfg.f)
    scenarios = [("no_attack", AttackSpec(), mean), ("no_defense", attack, mean)]
    scenarios += [("defense", attack, Aggregator.parse(name, cfg.f)) for name in cfg.agg]
    for kind, level in _partitions(cfg):
        for algo in cfg.algo:
            for scenario, atk, agg in scenarios:
                tcfg = _train_config(cfg, attack=atk, stats_agg=agg)
                records, s = train_run(cfg, algo, kind, level, tcfg)
                atk_name = atk.kind.value
                s = replace(s, scenario=scenario, attack=atk_name, agg=agg.name)
                rows.extend((algo, scenario, atk_name, agg.name, kind, level, r.round, r.loss, r.accuracy) for r in records)
                summaries.append(s)
    return rows, summaries


def run_robustness(cfg: ExperimentConfig) -> Path:
    cfg = cfg.resolved()
    out = _prepare_out(cfg)
    rows, summaries = robustness(cfg)
    path = out / "robustness.csv"
    write_csv(path, ("algo", "scenario", "attack", "agg", "partition", "level", "round", "loss", "accuracy"), rows)
    write_csv(out / "robustness_summary.csv", _SUMMARY_HEADER, [_summary_row(s) for s in summaries])
    return path


RUNNERS = {
    Experiment.SEPARABILITY: run_separability,
    Experiment.NORM_ERROR: run_norm_error,
    Experiment.TOY_TRAINING: run_toy_training,
    Experiment.ROBUSTNESS: run_robustness,
}


def run(cfg: ExperimentConfig) -> Path:
    cfg = cfg.resolved()
    return RUNNERS[cfg.experiment](cfg)
