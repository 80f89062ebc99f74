import numpy as np
import pytest

from fednorm.data import LabeledDataset, gamma_split, ring_classification
from fednorm.errors import ConfigError, NumericalFailure
from fednorm.model import Mode, Network, NormContext, nll_loss, toy_architecture
from fednorm.robust import Aggregator, AttackSpec
from fednorm.stats import batch_moments, update_running
from fednorm.training import (
    BatchSampler,
    Client,
    TrainConfig,
    TrainState,
    centralized_round,
    dsgd_round,
    evaluate,
    make_clients,
    normalization_error,
    train,
)

BACKENDS = ["centralized", "fbn", "naive", "fixbn"]


def ring_parts(gamma=0.0, n=10, per_class=60, seed=0):
    return gamma_split(ring_classification(per_class, 10, seed=seed), gamma, n, seed)


def states_equal(a: TrainState, b: TrainState) -> bool:
    if a.params.flatten().tobytes() != b.params.flatten().tobytes():
        return False
    return all(
        a.stats[i].mean.tobytes() == b.stats[i].mean.tobytes() and a.stats[i].var.tobytes() == b.stats[i].var.tobytes()
        for i in a.stats
    )


class TestSampler:
    def test_epoch_without_replacement(self):
        s = BatchSampler(12, 4, seed=0, client_id=3)
        epoch = np.concatenate([s.next() for _ in range(3)])
        assert sorted(epoch.tolist()) == list(range(12))

    def test_partial_tail_skipped(self):
        s = BatchSampler(10, 4, seed=0, client_id=0)
        first = np.concatenate([s.next() for _ in range(2)])
        assert len(set(first.tolist())) == 8

    def test_small_client_recycles_points(self):
        s = BatchSampler(3, 7, seed=0, client_id=0)
        idx = s.next()
        assert idx.shape == (7,)
        assert sorted(idx[:6].tolist()) == [0, 0, 1, 1, 2, 2]

    def test_empty_client(self):
        with pytest.raises(ConfigError):
            BatchSampler(0, 4, seed=0, client_id=0)


class TestDsgdRound:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_single_client_matches_centralized(self, backend):
        net = Network(toy_architecture(2, 16, 10, backend))
        data = ring_classification(10, 10, seed=1)
        cfg = TrainConfig(rounds=8, switch_round=4)
        a = b = TrainState.initial(net, 3)
        ca, cb = make_clients([data], 20, 5), make_clients([data], 20, 5)
        for _ in range(cfg.rounds):
            a, _ = dsgd_round(net, a, ca, cfg)
            b, _ = centralized_round(net, b, cb, cfg)
            assert states_equal(a, b)

    def test_identical_clients_single_gradient(self):
        net = Network(toy_architecture(2, 8, 10, "fbn"))
        data = ring_classification(5, 10, seed=2)
        clients = [Client(data, BatchSampler(len(data), 10, seed=4, client_id=0)) for _ in range(4)]
        probe = Client(data, BatchSampler(len(data), 10, seed=4, client_id=0))
        cfg = TrainConfig(rounds=1, lr=1.0, momentum=0.0)
        state = TrainState.initial(net, 0)
        new, _ = dsgd_round(net, state, clients, cfg)
        x, y = probe.sample()
        ctx = NormContext(state.stats, n_clients=4)
        lp, cache = net.forward(state.params, x, Mode.TRAIN, ctx)
        g = net.backward(state.params, cache, nll_loss(lp, y)[1])
        np.testing.assert_allclose(state.params.flatten() - new.params.flatten(), g, rtol=1e-12, atol=1e-15)

    def test_one_round_stats_match_centralized(self):
        parts = ring_parts()
        fed_net = Network(toy_architecture(2, 32, 10, "fbn"))
        central_net = Network(toy_architecture(2, 32, 10, "centralized"))
        cfg = TrainConfig(rounds=1)
        fed, _ = dsgd_round(fed_net, TrainState.initial(fed_net, 0), make_clients(parts, 30, 1), cfg)
        cen, _ = centralized_round(central_net, TrainState.initial(central_net, 0), make_clients(parts, 30, 1), cfg)
        np.testing.assert_allclose(fed.stats[1].mean, cen.stats[1].mean, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(fed.stats[1].var, cen.stats[1].var, rtol=1e-9)

    def test_paired_zero_lr_stats_match_every_round(self):
        parts = ring_parts(gamma=0.1)
        fed_net = Network(toy_architecture(2, 32, 10, "fbn"))
        central_net = Network(toy_architecture(2, 32, 10, "centralized"))
        cfg = TrainConfig(rounds=30, lr=0.0)
        fed, cen = TrainState.initial(fed_net, 0), TrainState.initial(central_net, 0)
        fc, cc = make_clients(parts, 30, 1), make_clients(parts, 30, 1)
        for _ in range(cfg.rounds):
            fed, _ = dsgd_round(fed_net, fed, fc, cfg)
            cen, _ = centralized_round(central_net, cen, cc, cfg)
            np.testing.assert_allclose(fed.stats[1].mean, cen.stats[1].mean, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(fed.stats[1].var, cen.stats[1].var, rtol=1e-9)

    def test_stats_oracle_along_a_training_run(self):
        """Each round's shared stats equal BatchNorm's update on that round's union batch."""
        parts = ring_parts()
        net = Network(toy_architecture(2, 32, 10, "fbn"))
        clients = make_clients(parts, 30, 1)
        mirror = make_clients(parts, 30, 1)
        cfg = TrainConfig(rounds=25)
        state = TrainState.initial(net, 0)
        for _ in range(cfg.rounds):
            union = np.concatenate([c.sample()[0] for c in mirror])
            pre = union @ state.params.arrays["0.weight"] + state.params.arrays["0.bias"]
            expected = update_running(state.stats[1], batch_moments(pre), pre.shape[0])
            state, _ = dsgd_round(net, state, clients, cfg)
            np.testing.assert_allclose(state.stats[1].mean, expected.mean, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(state.stats[1].var, expected.var, rtol=1e-9)

    def test_unequal_batches_rejected(self):
        net = Network(toy_architecture(2, 8, 10, "fbn"))
        data = ring_classification(5, 10, seed=0)
        clients = [Client(data, BatchSampler(50, 10, 0, 0)), Client(data, BatchSampler(50, 12, 0, 1))]
        with pytest.raises(ConfigError):
            dsgd_round(net, TrainState.initial(net, 0), clients, TrainConfig(rounds=1))

    def test_server_and_client_momentum_agree_for_mean(self):
        parts = ring_parts()
        net = Network(toy_architecture(2, 16, 10, "fbn"))
        out = []
        for site in ("client", "server"):
            state, _ = train(net, make_clients(parts, 30, 1), TrainConfig(rounds=5, momentum_site=site), seed=0)
            out.append(state.params.flatten())
        np.testing.assert_allclose(out[0], out[1], rtol=1e-10, atol=1e-12)


class TestCentralizedRound:
    def test_full_batch_loss_non_increasing(self):
        parts = ring_parts(per_class=5)
        net = Network(toy_architecture(2, 32, 10, "centralized"))
        _, records = train(net, make_clients(parts, 5, 1), TrainConfig(rounds=10), seed=2, centralized=True)
        losses = [r.loss for r in records]
        assert all(a >= b for a, b in zip(losses, losses[1:])), losses

    def test_zero_lr_keeps_parameters(self):
        net = Network(toy_architecture(2, 8, 10, "centralized"))
        state = TrainState.initial(net, 0)
        new, _ = centralized_round(net, state, make_clients(ring_parts(), 10, 0), TrainConfig(rounds=1, lr=0.0))
        assert new.params.flatten().tobytes() == state.params.flatten().tobytes()


class TestEvaluate:
    def test_memorized_points(self):
        data = LabeledDataset(np.array([[10.0, 0.0], [-5.0, 8.0], [-5.0, -8.0]]), np.array([0, 1, 2]), 3)
        net = Network(toy_architecture(2, 16, 3, "centralized"))
        state, _ = train(net, make_clients([data], 3, 0), TrainConfig(rounds=200), seed=0, centralized=True)
        assert evaluate(net, state.params, state.eval_stats(), data) == 1.0

    def test_random_params_chance(self):
        rng = np.random.default_rng(0)
        n, c = 4000, 10
        test = LabeledDataset(rng.normal(scale=10, size=(n, 2)), rng.integers(0, c, n), c)
        net = Network(toy_architecture(2, 32, c, "fbn"))
        acc = evaluate(net, net.init_params(1), net.initial_stats(), test)
        assert abs(acc - 1 / c) <= 5 * np.sqrt((1 / c) * (1 - 1 / c) / n)

    def test_batch_independent(self):
        net = Network(toy_architecture(2, 32, 10, "fbn"))
        state, _ = train(net, make_clients(ring_parts(1.0), 30, 0), TrainConfig(rounds=20), seed=0)
        test = ring_classification(10, 10, seed=5)
        whole = evaluate(net, state.params, state.stats, test)
        per = np.mean([evaluate(net, state.params, state.stats, test.subset([i])) for i in range(len(test))])
        assert whole == per

    def test_empty(self):
        net = Network(toy_architecture())
        with pytest.raises(ConfigError):
            evaluate(net, net.init_params(0), net.initial_stats(), LabeledDataset(np.zeros((0, 2)), np.zeros(0), 10))


class TestTrain:
    def test_deterministic(self):
        net = Network(toy_architecture(2, 16, 10, "fixbn"))
        test = ring_classification(10, 10, seed=9)
        runs = [train(net, make_clients(ring_parts(0.1), 30, 1), TrainConfig(rounds=20), test, seed=3)[1] for _ in range(2)]
        assert [(r.loss, r.accuracy) for r in runs[0]] == [(r.loss, r.accuracy) for r in runs[1]]

    def test_accuracy_in_unit_interval(self):
        net = Network(toy_architecture(2, 16, 10, "naive"))
        _, recs = train(net, make_clients(ring_parts(), 30, 1), TrainConfig(rounds=10), ring_classification(5, 10), seed=0)
        assert all(0.0 <= r.accuracy <= 1.0 for r in recs)

    def test_fixbn_freezes_at_switch(self):
        net = Network(toy_architecture(2, 16, 10, "fixbn"))
        _, recs = train(net, make_clients(ring_parts(), 30, 1), TrainConfig(rounds=10, switch_round=4), seed=0, keep_stats=True)
        frozen = recs[3].stats[1]
        for r in recs[4:]:
            assert r.stats[1].var.tobytes() == frozen.var.tobytes()
        assert recs[2].stats[1].var.tobytes() != frozen.var.tobytes()

    def test_divergence_raises_or_is_recorded(self):
        net = Network(toy_architecture(2, 16, 10, "fbn"))
        cfg = TrainConfig(rounds=40, lr=1e6)
        with pytest.raises(NumericalFailure):
            train(net, make_clients(ring_parts(), 30, 1), cfg, seed=0)
        _, recs = train(net, make_clients(ring_parts(), 30, 1), cfg, ring_classification(5, 10), seed=0, halt_on_divergence=True)
        assert len(recs) == 40 and recs[-1].diverged and recs[-1].accuracy == 0.0

    def test_invalid_attack_config(self):
        net = Network(toy_architecture(2, 8, 10, "fbn"))
        cfg = TrainConfig(rounds=1, attack=AttackSpec.last_clients("sf", 10, 5))
        with pytest.raises(ConfigError):
            train(net, make_clients(ring_parts(), 30, 1), cfg)
        cfg = TrainConfig(rounds=1, stats_agg=Aggregator.parse("trimmed_mean", 5))
        with pytest.raises(ConfigError):
            train(net, make_clients(ring_parts(), 30, 1), cfg)

    def test_attack_changes_fbn_stats(self):
        net = Network(toy_architecture(2, 8, 10, "fbn"))
        clean, _ = train(net, make_clients(ring_parts(), 30, 1), TrainConfig(rounds=3), seed=0)
        cfg = TrainConfig(rounds=3, attack=AttackSpec.last_clients("sf", 10, 3))
        hit, _ = train(net, make_clients(ring_parts(), 30, 1), cfg, seed=0)
        assert not np.allclose(clean.stats[1].mean, hit.stats[1].mean)


class TestNormalizationError:
    def test_identical(self):
        pts = [np.random.default_rng(i).normal(size=(5, 2)) for i in range(3)]
        assert normalization_error(pts, pts) == 0.0

    def test_translation(self):
        pts = [np.random.default_rng(i).normal(size=(5, 2)) for i in range(3)]
        c = np.array([3.0, -4.0])
        assert normalization_error([p + c for p in pts], pts) == pytest.approx(5.0)

    def test_mismatch(self):
        with pytest.raises(ConfigError):
            normalization_error([np.zeros((2, 2))], [np.zeros((3, 2))])
        with pytest.raises(ConfigError):
            normalization_error([np.zeros((2, 2))], [])


def test_overflowing_rows_count_as_wrong():
    net = Network(toy_architecture(2, 8, 10, "fbn"))
    params = net.init_params(0)
    params.arrays["0.weight"][:] = 1e308
    test = ring_classification(2, 10, seed=0)
    assert evaluate(net, params, net.initial_stats(), test) == 0.0
