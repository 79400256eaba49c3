import numpy as np
import pytest
from scipy import stats

from fedsim import compressor, data, federation, model
from fedsim.errors import ConfigurationError, NumericalError
from fedsim.federation import ControlVariates, RunConfig, lr, rng_stream, schedule
from fedsim.privacy import PrivacyConfig


def small_problem(seed=0, n=400, devices=8, n_digits=3, classes=3, sep=4.0):
    ds = data.synth_classification(n, 4, classes, sep, seed=seed)
    parts = data.partition_label_skew(ds, devices, n_digits, seed=seed)
    return ds, parts


def trajectories(cfg, ds, parts):
    snaps = []
    federation.run(cfg, ds, parts, on_round=lambda k, x: snaps.append(x))
    return snaps


class TestRunConfig:
    def test_dist_sgd_coercions(self):
        cfg = RunConfig("dist_sgd", num_devices=12, participants=3, local_steps=7,
                        rounds=5, quant_level=8)
        assert cfg.local_steps == 1
        assert cfg.participants == 12
        assert cfg.quant_level is None

    def test_fedavg_drops_quantizer(self):
        cfg = RunConfig("fedavg", num_devices=4, participants=2, rounds=1, quant_level=6)
        assert cfg.quant_level is None

    def test_rounds_iters_derivation(self):
        cfg = RunConfig("fedpaq", num_devices=4, participants=2, local_steps=10,
                        total_iters=105, rounds=None)
        assert cfg.rounds == 10
        cfg2 = RunConfig("fedpaq", num_devices=4, participants=2, local_steps=10, rounds=7)
        assert cfg2.total_iters == 70
        with pytest.raises(ConfigurationError):
            RunConfig("fedpaq", num_devices=4, participants=2, local_steps=10,
                      rounds=3, total_iters=45)

    def test_privacy_pairing(self):
        with pytest.raises(ConfigurationError):
            RunConfig("dp_fedpaq", num_devices=4, participants=2, rounds=1)
        with pytest.raises(ConfigurationError):
            RunConfig("fedavg", num_devices=4, participants=2, rounds=1,
                      privacy=PrivacyConfig(1.0, 1e-4, 1.0))

    def test_participant_bounds(self):
        with pytest.raises(ConfigurationError):
            RunConfig("fedpaq", num_devices=4, participants=5, rounds=1)


class TestSchedule:
    def test_full_participation(self):
        assert schedule(9, 9, 0, seed=1) == list(range(9))

    def test_deterministic_and_sorted(self):
        a = schedule(50, 7, 3, seed=11)
        assert a == schedule(50, 7, 3, seed=11)
        assert a == sorted(a)
        assert len(set(a)) == 7

    def test_singleton_uniform(self):
        draws = [schedule(100, 1, k, seed=5)[0] for k in range(10_000)]
        counts = np.bincount(draws, minlength=100)
        assert stats.chisquare(counts).pvalue > 0.01


class TestLearningRate:
    def test_experimental_values(self):
        cfg = RunConfig("fedpaq", num_devices=4, participants=2, local_steps=10,
                        rounds=1, eta0=0.1)
        assert lr(0, cfg) == pytest.approx(0.1, rel=1e-15)
        assert lr(10, cfg) == pytest.approx(0.05, rel=1e-15)

    def test_theoretical_value(self):
        cfg = RunConfig("fedpaq", num_devices=4, participants=2, local_steps=10,
                        rounds=1, lr_mode="theoretical", mu=0.1)
        assert lr(0, cfg) == pytest.approx(1.0, rel=1e-15)

    def test_theoretical_needs_positive_mu(self):
        cfg = RunConfig("fedpaq", num_devices=4, participants=2, local_steps=10,
                        rounds=1, lr_mode="theoretical", mu=0.1)
        cfg.mu = 0.0
        with pytest.raises(ConfigurationError):
            lr(0, cfg)


class TestAggregate:
    def test_zero_updates_fixed_point(self):
        x = np.arange(4.0)
        out = federation.aggregate(x, [np.zeros(4), np.zeros(4)], 1.0)
        np.testing.assert_array_equal(out, x)

    def test_cancellation(self):
        x = np.ones(3)
        u = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(federation.aggregate(x, [u, -u], 1.0), x)

    def test_single_update_identity(self):
        x = np.zeros(3)
        u = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(federation.aggregate(x, [u], 1.0), u)

    def test_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            federation.aggregate(np.zeros(3), [np.zeros(4)], 1.0)


class TestLocalUpdate:
    def test_stationary_point_zero_update(self):
        # Zero features with balanced two-class labels: softmax probabilities
        # are exactly one half at the origin, so the full-batch gradient is
        # exactly zero and the update stays bitwise zero through all steps.
        features = np.zeros((12, 2))
        labels = np.array([0, 1] * 6)
        ds = data.Dataset(features, labels, 2)
        part = data.DevicePartition(0, np.arange(12))
        cfg = RunConfig("fedavg", num_devices=1, participants=1, local_steps=5,
                        rounds=1, batch_size=12, mu=0.0, seed=0)
        res = federation.local_update(0, np.zeros(model.param_dim(2, 2)), cfg, ds, part, 0)
        np.testing.assert_array_equal(res.delta, np.zeros(model.param_dim(2, 2)))

    def test_fedpaq_single_step_matches_dist_sgd(self):
        ds, parts = small_problem()
        x = np.zeros(model.param_dim(ds.dim, ds.classes))
        base = dict(num_devices=8, participants=8, local_steps=1, rounds=1,
                    batch_size=5, seed=123, mu=0.01)
        res_a = federation.local_update(
            2, x, RunConfig("fedpaq", quant_level=None, **base), ds, parts[2], 0
        )
        res_b = federation.local_update(2, x, RunConfig("dist_sgd", **base), ds, parts[2], 0)
        assert np.array_equal(res_a.delta, res_b.delta)


class TestDegenerateEquivalences:
    def test_fedpaq_collapses_to_dist_sgd(self):
        ds, parts = small_problem(seed=4)
        shared = dict(num_devices=8, participants=8, local_steps=1, rounds=5,
                      batch_size=5, seed=31, mu=0.01)
        t1 = trajectories(RunConfig("dist_sgd", **shared), ds, parts)
        t2 = trajectories(RunConfig("fedpaq", quant_level=None, **shared), ds, parts)
        for a, b in zip(t1, t2):
            assert np.array_equal(a, b)

    def test_fedpaq_without_quantizer_is_fedavg(self):
        ds, parts = small_problem(seed=5)
        shared = dict(num_devices=8, participants=3, local_steps=4, rounds=5,
                      batch_size=5, seed=7, mu=0.01)
        t1 = trajectories(RunConfig("fedavg", **shared), ds, parts)
        t2 = trajectories(RunConfig("fedpaq", quant_level=None, **shared), ds, parts)
        for a, b in zip(t1, t2):
            assert np.array_equal(a, b)

    def test_dp_fedpaq_noiseless_full_sample_is_fedpaq(self):
        # gamma=1 with one local step consumes the whole partition, a huge clip
        # bound disables clipping, and a fixed zero sensitivity zeroes the
        # noise, so the trajectories must agree bitwise under shared streams.
        ds, parts = small_problem(seed=6)
        n_k = parts[0].n_k
        shared = dict(num_devices=8, participants=4, local_steps=1, rounds=4,
                      batch_size=n_k, seed=17, mu=0.01, quant_level=6)
        priv = PrivacyConfig(epsilon=1.0, delta=1e-4, clip_c=1e9,
                             gamma=1.0, sensitivity_mode=0.0)
        t1 = trajectories(RunConfig("fedpaq", **shared), ds, parts)
        t2 = trajectories(RunConfig("dp_fedpaq", privacy=priv, **shared), ds, parts)
        for a, b in zip(t1, t2):
            assert np.array_equal(a, b)

    def test_scaffold_first_round_matches_fedavg(self):
        # Control variates start at zero, so the first round is plain fedavg.
        base = data.synth_classification(60, 3, 3, 3.0, seed=9)
        ds = data.Dataset(np.tile(base.features, (4, 1)), np.tile(base.labels, 4), 3)
        parts = [data.DevicePartition(i, np.arange(i * 60, (i + 1) * 60)) for i in range(4)]
        shared = dict(num_devices=4, participants=4, local_steps=3, rounds=1,
                      batch_size=10, seed=3, mu=0.05)
        t1 = trajectories(RunConfig("fedavg", **shared), ds, parts)
        t2 = trajectories(RunConfig("scaffold", **shared), ds, parts)
        assert np.array_equal(t1[0], t2[0])


class TestScaffold:
    def test_control_variate_updates(self):
        ds, parts = small_problem(seed=2)
        d = model.param_dim(ds.dim, ds.classes)
        cfg = RunConfig("scaffold", num_devices=8, participants=8, local_steps=3,
                        rounds=1, batch_size=5, seed=1, mu=0.01)
        variates = ControlVariates.zeros(8, d)
        x = np.zeros(d)
        eta = lr(0, cfg)
        deltas = []
        for i in range(8):
            res = federation.local_update(i, x, cfg, ds, parts[i], 0, variates)
            # With c = c_i = 0 the new local variate is -delta/(E*eta).
            np.testing.assert_allclose(
                res.delta_c, -res.delta / (cfg.local_steps * eta), rtol=1e-12
            )
            deltas.append(res.delta)

    def test_scaffold_bits_doubled(self):
        ds, parts = small_problem(seed=3)
        d = model.param_dim(ds.dim, ds.classes)
        cfg = RunConfig("scaffold", num_devices=8, participants=4, local_steps=2,
                        rounds=2, batch_size=5, seed=2, mu=0.01)
        recs = federation.run(cfg, ds, parts)
        assert all(r.bits_round == 4 * 2 * 32 * d for r in recs)


class TestRun:
    def test_zero_rounds(self):
        ds, parts = small_problem()
        cfg = RunConfig("fedavg", num_devices=8, participants=2, local_steps=2,
                        rounds=0, batch_size=5)
        assert federation.run(cfg, ds, parts) == []

    def test_records_deterministic(self):
        ds, parts = small_problem(seed=8)
        cfg = RunConfig("fedpaq", num_devices=8, participants=3, local_steps=3,
                        rounds=6, batch_size=5, quant_level=4, seed=99, mu=0.01)
        r1 = federation.run(cfg, ds, parts)
        r2 = federation.run(cfg, ds, parts)
        assert r1 == r2
        priv = PrivacyConfig(epsilon=1.0, delta=1e-4, clip_c=1.0, gamma=0.4)
        dp_cfg = RunConfig("dp_fedpaq", num_devices=8, participants=3, local_steps=3,
                           rounds=4, quant_level=4, seed=99, mu=0.01, privacy=priv)
        assert federation.run(dp_cfg, ds, parts) == federation.run(dp_cfg, ds, parts)

    def test_payload_accounting(self):
        ds, parts = small_problem(seed=1)
        d = model.param_dim(ds.dim, ds.classes)
        cfg = RunConfig("fedpaq", num_devices=8, participants=5, local_steps=2,
                        rounds=3, batch_size=5, quant_level=4, seed=12, mu=0.01)
        recs = federation.run(cfg, ds, parts)
        per_round = 5 * compressor.bit_cost(d, 4)
        assert [r.bits_round for r in recs] == [per_round] * 3
        assert [r.bits_cum for r in recs] == [per_round * (k + 1) for k in range(3)]

    def test_strongly_convex_convergence(self):
        ds, parts = small_problem(seed=10, n=600, devices=6, n_digits=3)
        x_star = model.solve_reference_optimum(ds, mu=0.1, tol=1e-9)
        cfg = RunConfig("fedavg", num_devices=6, participants=6, local_steps=5,
                        rounds=100, batch_size=20, eta0=0.2, mu=0.1, seed=5)
        recs = federation.run(cfg, ds, parts, x_star=x_star)
        dist0 = float(x_star.params @ x_star.params)  # x starts at zero
        assert recs[-1].dist_sq_to_opt < dist0 / 10

    def test_nan_abort_names_device_and_round(self):
        ds, parts = small_problem(seed=11)
        cfg = RunConfig("fedavg", num_devices=8, participants=8, local_steps=4,
                        rounds=3, batch_size=5, eta0=1e308, mu=0.5, seed=0)
        with pytest.raises(NumericalError, match=r"device \d+ at round \d+"):
            federation.run(cfg, ds, parts)

    def test_dp_batch_derivation_errors(self):
        ds, parts = small_problem(seed=14)
        n_k = parts[0].n_k
        starved = PrivacyConfig(epsilon=1.0, delta=1e-4, clip_c=1.0, gamma=0.01)
        cfg = RunConfig("dp_fedpaq", num_devices=8, participants=2, local_steps=10,
                        rounds=1, seed=0, privacy=starved)
        with pytest.raises(ConfigurationError, match="no room"):
            federation.run(cfg, ds, parts)
        explicit = PrivacyConfig(epsilon=1.0, delta=1e-4, clip_c=1.0, gamma=None)
        cfg = RunConfig("dp_fedpaq", num_devices=8, participants=2, local_steps=10,
                        rounds=1, batch_size=n_k, seed=0, privacy=explicit)
        with pytest.raises(ConfigurationError, match="rejected"):
            federation.run(cfg, ds, parts)

    def test_dp_records_privacy_columns(self):
        ds, parts = small_problem(seed=12)
        priv = PrivacyConfig(epsilon=1.0, delta=1e-4, clip_c=1.0, gamma=0.5)
        cfg = RunConfig("dp_fedpaq", num_devices=8, participants=4, local_steps=2,
                        rounds=2, quant_level=4, seed=3, mu=0.01, privacy=priv)
        recs = federation.run(cfg, ds, parts)
        for r in recs:
            assert np.isfinite(r.eps_prime) and r.eps_prime <= 1.0
            assert r.sigma_sq > 0
        plain = RunConfig("fedpaq", num_devices=8, participants=4, local_steps=2,
                          rounds=1, quant_level=4, seed=3, mu=0.01)
        rec = federation.run(plain, ds, parts)[0]
        assert np.isnan(rec.eps_prime) and np.isnan(rec.sigma_sq)


class TestRngIsolation:
    def test_streams_keyed_per_device_round(self):
        a = rng_stream(5, "batch", 3, 7).integers(0, 1000, 8)
        b = rng_stream(5, "batch", 3, 7).integers(0, 1000, 8)
        c = rng_stream(5, "batch", 4, 7).integers(0, 1000, 8)
        d = rng_stream(5, "batch", 3, 8).integers(0, 1000, 8)
        e = rng_stream(5, "noise", 3, 7).integers(0, 1000, 8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)
        assert not np.array_equal(a, e)

    def test_other_device_data_does_not_change_draws(self):
        # Device 2's update depends only on its own partition and streams; a
        # different partition for device 5 must not alter it.
        ds, parts = small_problem(seed=13)
        alt = list(parts)
        alt[5] = data.DevicePartition(5, parts[5].sample_indices[:30])
        x = np.zeros(model.param_dim(ds.dim, ds.classes))
        cfg = RunConfig("fedavg", num_devices=8, participants=8, local_steps=3,
                        rounds=1, batch_size=5, seed=21, mu=0.01)
        res_a = federation.local_update(2, x, cfg, ds, parts[2], 0)
        res_b = federation.local_update(2, x, cfg, ds, alt[2], 0)
        assert np.array_equal(res_a.delta, res_b.delta)
