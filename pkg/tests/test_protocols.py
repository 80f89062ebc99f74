import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fednorm.errors import DimensionError, InvalidStatisticsError, ProtocolError
from fednorm.protocols import (
    ClientStatsReport,
    FixBnState,
    Phase,
    SharedState,
    batchnorm_step,
    eval_normalize,
    fbn_client_step,
    fbn_server_aggregate,
    fixbn_step,
    naive_client_step,
    naive_server_aggregate,
)
from fednorm.stats import AffineParams, RunningStats, batch_moments, update_running

# 1 + TINY == 1 in float64, so normalization with this eps is exact
TINY = 1e-300
ID1 = AffineParams.identity(1)


def unit_stats(d=1, beta=0.1, eps=TINY):
    return RunningStats(np.zeros(d), np.ones(d), momentum=beta, eps=eps)


def col(*values):
    return np.array(values, dtype=np.float64)[:, None]


def run_pair(stream, beta, d):
    """Iterate FBN and centralized BatchNorm on the same per-round client batches."""
    fbn = unit_stats(d, beta, 1e-5)
    central = fbn
    n, k = len(stream[0]), stream[0][0].shape[0]
    pairs = []
    for batches in stream:
        shared = SharedState(fbn, n, k)
        reports = [fbn_client_step(b, shared, AffineParams.identity(d), i)[1] for i, b in enumerate(batches)]
        fbn = fbn_server_aggregate(reports, shared)
        central = update_running(central, batch_moments(np.concatenate(batches)), n * k)
        pairs.append((fbn, central))
    return pairs


class TestFbnClient:
    def test_report_first_client(self):
        shared = SharedState(unit_stats(), n=2, k_per_client=2)
        out, rep = fbn_client_step(col(0, 2), shared, ID1)
        np.testing.assert_allclose(rep.run_mean, [0.1])
        np.testing.assert_allclose(rep.run_var, [0.9 + 0.1 * (4 / 3)])
        np.testing.assert_allclose(rep.run_var, [1.033333], rtol=1e-6)
        np.testing.assert_array_equal(out, col(0, 2))

    def test_report_second_client(self):
        shared = SharedState(unit_stats(), n=2, k_per_client=2)
        _, rep = fbn_client_step(col(4, 6), shared, ID1, client_id=1)
        np.testing.assert_allclose(rep.run_mean, [0.5])
        np.testing.assert_allclose(rep.run_var, [1.033333], rtol=1e-6)
        assert rep.client_id == 1

    def test_wrong_batch_size(self):
        shared = SharedState(unit_stats(), n=2, k_per_client=2)
        with pytest.raises(ProtocolError):
            fbn_client_step(col(0, 1, 2), shared, ID1)

    def test_dimension_mismatch(self):
        shared = SharedState(unit_stats(2), n=2, k_per_client=2)
        with pytest.raises(DimensionError):
            fbn_client_step(col(0, 1), shared, ID1)

    def test_kn_below_two(self):
        with pytest.raises(InvalidStatisticsError):
            SharedState(unit_stats(), n=1, k_per_client=1)

    def test_single_row_batches_allowed_when_kn_at_least_two(self):
        shared = SharedState(unit_stats(), n=3, k_per_client=1)
        _, rep = fbn_client_step(col(5.0), shared, ID1)
        np.testing.assert_allclose(rep.run_mean, [0.5])
        np.testing.assert_allclose(rep.run_var, [0.9])

    def test_same_map_for_every_client(self):
        rng = np.random.default_rng(3)
        stats = RunningStats(rng.normal(size=2), rng.uniform(0.5, 2, size=2))
        shared = SharedState(stats, n=3, k_per_client=4)
        affine = AffineParams(rng.normal(size=2), rng.normal(size=2))
        probe = rng.normal(size=(4, 2))
        outs = [fbn_client_step(probe, shared, affine, i)[0] for i in range(3)]
        for o in outs[1:]:
            np.testing.assert_array_equal(o, outs[0])


class TestFbnServer:
    def test_matches_union_fixture(self):
        shared = SharedState(unit_stats(), n=2, k_per_client=2)
        reports = [fbn_client_step(b, shared, ID1, i)[1] for i, b in enumerate([col(0, 2), col(4, 6)])]
        new = fbn_server_aggregate(reports, shared)
        np.testing.assert_allclose(new.mean, [0.3])
        np.testing.assert_allclose(new.var, [1.566667], rtol=1e-6)
        central = update_running(unit_stats(), batch_moments(col(0, 2, 4, 6)), 4)
        np.testing.assert_allclose(new.var, central.var, rtol=1e-12)

    def test_identical_reports_no_correction(self):
        r = ClientStatsReport(np.array([0.4, -1.0]), np.array([2.0, 3.0]))
        new = fbn_server_aggregate([r, r, r], SharedState(unit_stats(2), 3, 5))
        np.testing.assert_allclose(new.mean, r.run_mean)
        np.testing.assert_allclose(new.var, r.run_var)

    def test_single_client(self):
        r = ClientStatsReport(np.array([0.7]), np.array([1.2]))
        new = fbn_server_aggregate([r], SharedState(unit_stats(), 1, 4))
        np.testing.assert_array_equal(new.mean, r.run_mean)
        np.testing.assert_array_equal(new.var, r.run_var)

    def test_report_count(self):
        r = ClientStatsReport(np.zeros(1), np.ones(1))
        with pytest.raises(ProtocolError):
            fbn_server_aggregate([r], SharedState(unit_stats(), 2, 2))

    def test_negative_variance_report(self):
        with pytest.raises(InvalidStatisticsError):
            fbn_server_aggregate(
                [ClientStatsReport(np.zeros(1), np.ones(1)), ClientStatsReport(np.zeros(1), -np.ones(1))],
                SharedState(unit_stats(), 2, 2),
            )

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(1, 5),
        st.integers(1, 6),
        st.integers(1, 3),
        st.floats(0.01, 0.9),
        st.integers(1, 15),
        st.integers(0, 2**32 - 1),
    )
    def test_oracle_every_round(self, n, k, d, beta, rounds, seed):
        if n * k < 2:
            k = 2
        rng = np.random.default_rng(seed)
        offsets = rng.normal(0, 5, size=(n, d))
        stream = [[offsets[i] + rng.normal(size=(k, d)) for i in range(n)] for _ in range(rounds)]
        for fbn, central in run_pair(stream, beta, d):
            np.testing.assert_allclose(fbn.mean, central.mean, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(fbn.var, central.var, rtol=1e-9)


class TestNaive:
    def test_client_fixture(self):
        out, local = naive_client_step(col(0, 2), unit_stats(), ID1)
        np.testing.assert_allclose(out, col(-1, 1))
        np.testing.assert_allclose(local.mean, [0.1])
        np.testing.assert_allclose(local.var, [1.1])

    def test_constant_batch_maps_to_shift(self):
        out, _ = naive_client_step(np.full((4, 1), 3.0), unit_stats(eps=1e-5), AffineParams(np.ones(1), np.full(1, 0.5)))
        np.testing.assert_array_equal(out, np.full((4, 1), 0.5))

    def test_offset_batches_become_identical(self):
        a, _ = naive_client_step(col(0, 2), unit_stats(), ID1)
        b, _ = naive_client_step(col(4, 6), unit_stats(), ID1)
        np.testing.assert_allclose(a, b)

    def test_needs_two_rows(self):
        with pytest.raises(InvalidStatisticsError):
            naive_client_step(col(1.0), unit_stats(), ID1)

    def test_server_underestimates_oracle(self):
        shared = SharedState(unit_stats(), n=2, k_per_client=2)
        reports = [fbn_client_step(b, shared, ID1, i)[1] for i, b in enumerate([col(0, 2), col(4, 6)])]
        naive = naive_server_aggregate(reports)
        np.testing.assert_allclose(naive.mean, [0.3])
        np.testing.assert_allclose(naive.var, [1.033333], rtol=1e-6)
        assert naive.var[0] < fbn_server_aggregate(reports, shared).var[0]

    def test_server_identical_reports(self):
        r = ClientStatsReport(np.array([1.0, 2.0]), np.array([0.5, 4.0]))
        new = naive_server_aggregate([r, r])
        np.testing.assert_array_equal(new.mean, r.run_mean)
        np.testing.assert_array_equal(new.var, r.run_var)

    @given(st.floats(-100, 100), st.floats(0.01, 100))
    def test_server_ignores_mean_spread(self, mu, v):
        reps = [ClientStatsReport(np.array([mu]), np.array([v])), ClientStatsReport(np.array([-mu]), np.array([v]))]
        np.testing.assert_allclose(naive_server_aggregate(reps).var, [v])

    def test_server_empty(self):
        with pytest.raises(ProtocolError):
            naive_server_aggregate([])

    def test_template_carries_hyperparameters(self):
        tmpl = RunningStats(np.zeros(1), np.ones(1), momentum=0.25, eps=1e-3)
        new = naive_server_aggregate([ClientStatsReport(np.ones(1), np.ones(1))], tmpl)
        assert new.momentum == 0.25 and new.eps == 1e-3

    @settings(max_examples=50)
    @given(st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_naive_var_never_above_fbn(self, n, seed):
        rng = np.random.default_rng(seed)
        means = rng.normal(size=(n, 2))
        reps = [ClientStatsReport(m, rng.uniform(0.1, 3, size=2), i) for i, m in enumerate(means)]
        shared = SharedState(unit_stats(2), n, 4)
        assert (naive_server_aggregate(reps).var <= fbn_server_aggregate(reps, shared).var).all()


class TestFixBn:
    def test_phase_from_round(self):
        assert FixBnState(4, 5).phase is Phase.BATCH
        assert FixBnState(5, 5).phase is Phase.FROZEN

    def test_batch_phase_matches_naive(self):
        x = np.random.default_rng(1).normal(size=(6, 3))
        local = unit_stats(3, eps=1e-5)
        aff = AffineParams(np.full(3, 2.0), np.full(3, -1.0))
        a = fixbn_step(x, FixBnState(0, 10), local, aff)
        b = naive_client_step(x, local, aff)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1].var, b[1].var)

    def test_frozen_identity_stats(self):
        x = col(1.0, -4.0, 2.5)
        out, local = fixbn_step(x, FixBnState(10, 10, unit_stats()), unit_stats(), ID1)
        np.testing.assert_array_equal(out, x)

    def test_frozen_same_map_and_no_update(self):
        frozen = RunningStats(np.array([1.0]), np.array([4.0]))
        local = RunningStats(np.array([0.3]), np.array([2.0]))
        state = FixBnState(12, 10, frozen)
        out1, l1 = fixbn_step(col(0, 1), state, local, ID1)
        out2, l2 = fixbn_step(col(1, 7, 9), state, local, ID1)
        np.testing.assert_allclose(out1[1], out2[0])
        assert l1 is local and l2 is local

    def test_frozen_without_stats(self):
        with pytest.raises(ProtocolError):
            fixbn_step(col(0, 1), FixBnState(10, 10), unit_stats(), ID1)


def test_eval_normalize_is_normalize():
    stats = RunningStats(np.array([3.0]), np.array([5.0]), eps=TINY)
    out = eval_normalize(col(0, 2, 4, 6), stats, ID1)
    np.testing.assert_allclose(out[:, 0], np.array([-3, -1, 1, 3]) / np.sqrt(5))


def test_batchnorm_step_is_centralized_reference():
    x = col(0, 2, 4, 6)
    out, stats = batchnorm_step(x, unit_stats(), ID1)
    np.testing.assert_allclose(out[:, 0], np.array([-3, -1, 1, 3]) / np.sqrt(5))
    np.testing.assert_allclose(stats.var, [1.566667], rtol=1e-6)
