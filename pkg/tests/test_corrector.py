import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hopcast.corrector import (LEVELS, AssociationMemory, ContextPools, CorrectorConfig,
                               HopcastCorrector, IntervalSheet, attention_weights,
                               build_association_memory, build_context_sets, channel_intervals,
                               context_states, correct_and_interval, encoder_loss_and_grad,
                               errors_from_weights, hopcast_evaluate, level_probs,
                               masked_attention, retrieval_loss, retrieve_errors,
                               sample_triplet_batch, train_correction_model)
from hopcast.dynamics import Role, TrajectorySet, system_spec
from hopcast.predictor import LinearMap
from hopcast.tensor_nn import finite_diff_gradcheck, init_mlp


def _set(data, role=Role.INTEGRATED, ids=None):
    data = np.asarray(data, dtype=float)
    spec = system_spec("LotkaVolterra").with_(horizon=max(data.shape[1], 2),
                                              n_trajectories=data.shape[0])
    if data.shape[2] != spec.channels:
        spec = spec.with_(model_derivatives=False)
    return TrajectorySet(role, data, data[:, 0].copy(), spec, 0, ids)


def _pools(n=6, t_len=10, c=2, seed=0, error_fn=None):
    rng = np.random.default_rng(seed)
    auto = rng.standard_normal((n, t_len, c))
    err = rng.standard_normal((n, t_len, c)) if error_fn is None else error_fn(auto)
    return build_context_sets(_set(auto + err), _set(auto, Role.AUTOREGRESSIVE), seed)


class TestContexts:
    def test_width_is_2c_plus_1(self):
        ctx = context_states(np.zeros((2, 5, 4)))
        assert ctx.shape == (2, 5, 9)

    def test_without_initial(self):
        assert context_states(np.zeros((2, 5, 4)), include_initial=False).shape == (2, 5, 5)

    def test_layout_and_one_based_time(self):
        data = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2)
        ctx = context_states(data)
        np.testing.assert_array_equal(ctx[1, 2, :2], data[1, 0])
        np.testing.assert_array_equal(ctx[1, 2, 2:4], data[1, 2])
        np.testing.assert_array_equal(ctx[0, :, 4], [1, 2, 3])

    def test_pools_aligned(self):
        pools = _pools()
        c = 2
        np.testing.assert_allclose(pools.errors, pools.keys[:, c:2 * c] - pools.queries[:, c:2 * c])
        np.testing.assert_array_equal(pools.keys[:, -1], pools.index[:, 1])
        np.testing.assert_array_equal(pools.queries[:, -1], pools.index[:, 1])
        assert len(pools) == 60 and pools.width == 5

    def test_unshuffled_order(self):
        auto = np.zeros((2, 3, 2))
        pools = build_context_sets(_set(auto), _set(auto, Role.AUTOREGRESSIVE), shuffle=False)
        np.testing.assert_array_equal(pools.index[:, 1], [1, 2, 3, 1, 2, 3])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_context_sets(_set(np.zeros((2, 3, 2))), _set(np.zeros((3, 3, 2))))


class TestTriplets:
    def test_distinct_rows(self):
        pools = _pools()
        batch = sample_triplet_batch(pools, 0, 20, np.random.default_rng(0))
        assert len({tuple(r) for r in batch.index}) == 20
        assert batch.queries.shape == (20, 5) and batch.values.shape == (20,)

    def test_deterministic(self):
        pools = _pools()
        a = sample_triplet_batch(pools, 1, 7, np.random.default_rng(3))
        b = sample_triplet_batch(pools, 1, 7, np.random.default_rng(3))
        np.testing.assert_array_equal(a.index, b.index)

    def test_values_follow_channel(self):
        pools = _pools()
        rows = sample_triplet_batch(pools, 1, 5, np.random.default_rng(0))
        match = [np.flatnonzero((pools.index == r).all(axis=1))[0] for r in rows.index]
        np.testing.assert_array_equal(rows.values, pools.errors[match, 1])

    def test_too_long(self):
        with pytest.raises(ValueError):
            sample_triplet_batch(_pools(), 0, 61, np.random.default_rng(0))


class TestMaskedAttention:
    def test_identical_embeddings_uniform_off_diagonal(self):
        e = np.ones((5, 3))
        attn, out = masked_attention(e, e, np.arange(5.0))
        expected = (np.ones((5, 5)) - np.eye(5)) / 4
        np.testing.assert_allclose(attn, expected)
        np.testing.assert_allclose(out, (10 - np.arange(5.0)) / 4)

    def test_one_hot_large_scale_selects_partner(self):
        keys = 100 * np.eye(4)
        queries = np.roll(keys, -1, axis=0)
        attn, out = masked_attention(queries, keys, np.array([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_allclose(attn, np.roll(np.eye(4), 1, axis=1), atol=1e-12)
        np.testing.assert_allclose(out, [2.0, 3.0, 4.0, 1.0])

    @given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 10 ** 6))
    def test_diagonal_zero_rows_sum_to_one(self, s, d, seed):
        rng = np.random.default_rng(seed)
        attn, _ = masked_attention(rng.standard_normal((3, s, d)) * 3,
                                   rng.standard_normal((3, s, d)) * 3, rng.standard_normal((3, s)))
        assert np.all(attn[:, np.arange(s), np.arange(s)] == 0)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0)
        assert np.all(attn >= 0)

    def test_unmasked(self):
        e = np.ones((3, 2))
        attn, _ = masked_attention(e, e, np.zeros(3), mask_diagonal=False)
        np.testing.assert_allclose(attn, np.full((3, 3), 1 / 3))

    def test_needs_two(self):
        with pytest.raises(ValueError):
            masked_attention(np.ones((1, 2)), np.ones((1, 2)), np.zeros(1))

    @given(st.floats(-5, 5), st.integers(0, 1000))
    def test_constant_values_zero_loss(self, c, seed):
        rng = np.random.default_rng(seed)
        loss, g_q, g_k, _ = retrieval_loss(rng.standard_normal((2, 6, 3)),
                                           rng.standard_normal((2, 6, 3)), np.full((2, 6), c))
        assert loss == pytest.approx(0.0, abs=1e-20)
        np.testing.assert_allclose(g_q, 0, atol=1e-12)

    def test_encoder_gradient(self):
        rng = np.random.default_rng(0)
        enc = init_mlp([5, 8, 3], 0, dtype="float64")
        q, k, v = rng.standard_normal((2, 6, 5)), rng.standard_normal((2, 6, 5)), \
            rng.standard_normal((2, 6))
        assert finite_diff_gradcheck(enc, lambda p: encoder_loss_and_grad(p, q, k, v)) < 1e-4


class TestTraining:
    def test_constant_errors_reach_zero_loss(self):
        pools = _pools(error_fn=lambda a: np.full_like(a, 0.7))
        model = train_correction_model(pools, 0, CorrectorConfig(seq_len=6, epochs=2,
                                                                 hidden=(8,)), 0)
        assert max(model.history["train_loss"]) < 1e-20
        assert model.value_scale == 1.0

    def test_learns_errors_linear_in_state(self):
        pools = _pools(n=20, t_len=20, error_fn=lambda a: 0.5 * a)
        cfg = CorrectorConfig(seq_len=20, epochs=60, hidden=(32,), lr=3e-3,
                              triplets_per_batch=4, patience=60)
        model = train_correction_model(pools, 0, cfg, 0)
        hist = model.history["holdout_loss"]
        assert min(hist) < 0.7 * hist[0]

    def test_deterministic(self):
        pools = _pools()
        cfg = CorrectorConfig(seq_len=5, epochs=3, hidden=(6,))
        a = train_correction_model(pools, 0, cfg, 4)
        b = train_correction_model(pools, 0, cfg, 4)
        np.testing.assert_array_equal(a.encoder.flat, b.encoder.flat)

    def test_no_encoder(self):
        pools = _pools()
        model = train_correction_model(pools, 1, CorrectorConfig(seq_len=5, use_encoder=False))
        assert model.encoder is None and model.trained
        assert model.embed_dim == pools.width

    def test_unshuffled_training_runs(self):
        cfg = CorrectorConfig(seq_len=5, epochs=2, hidden=(6,), shuffle=False)
        assert train_correction_model(_pools(), 0, cfg, 0).trained

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CorrectorConfig(seq_len=1)
        with pytest.raises(ValueError):
            CorrectorConfig(retrieval="Nearest")
        with pytest.raises(ValueError):
            train_correction_model(_pools(), 0, CorrectorConfig(seq_len=1000))


class TestMemoryAndRetrieval:
    @pytest.fixture(scope="class")
    @classmethod
    def trained(cls):
        pools = _pools()
        model = train_correction_model(pools, 0, CorrectorConfig(seq_len=5, epochs=2,
                                                                 hidden=(6,)), 0)
        return pools, model

    def test_memory_can_hold_whole_pool(self, trained):
        pools, model = trained
        mem = build_association_memory(model, pools, 0, len(pools), 1)
        assert len(mem) == len(pools)
        assert sorted(mem.rows) == list(range(len(pools)))

    def test_memory_rows_encoded(self, trained):
        pools, model = trained
        mem = build_association_memory(model, pools, 0, 20, 1)
        np.testing.assert_allclose(mem.encoded_keys, model.encode(pools.keys[mem.rows]))
        np.testing.assert_array_equal(mem.values, pools.errors[mem.rows, 0])
        assert len(set(mem.rows)) == 20

    def test_memory_read_only(self, trained):
        pools, model = trained
        mem = build_association_memory(model, pools, 0, 10, 1)
        with pytest.raises(ValueError):
            mem.values[0] = 1.0

    def test_memory_bounds(self, trained):
        pools, model = trained
        with pytest.raises(ValueError):
            build_association_memory(model, pools, 0, len(pools) + 1)
        with pytest.raises(ValueError):
            build_association_memory(model, pools, 0, 0)

    def test_inference_weights_normalised(self, trained):
        pools, model = trained
        mem = build_association_memory(model, pools, 0, 30, 1)
        w = attention_weights(model, mem, pools.queries[:4])
        np.testing.assert_allclose(w.sum(axis=1), 1.0)

    def test_retrieve_errors_from_memory(self, trained):
        pools, model = trained
        mem = build_association_memory(model, pools, 0, 30, 1)
        e, w = retrieve_errors(model, mem, pools.queries[0], 50, "Sample", 0)
        assert set(e) <= set(mem.values) and len(e) == 50
        np.testing.assert_allclose(w, 1 / 50)

    def test_dominant_weight(self):
        w = np.full(10, 1e-12)
        w[3] = 1.0
        e, _ = errors_from_weights(w / w.sum(), np.arange(10.0), 1000, "Sample", 0)
        assert np.all(e == 3.0)

    def test_uniform_weights_plus_minus_one(self):
        values = np.array([-1.0, 1.0] * 50)
        e, _ = errors_from_weights(np.full(100, 0.01), values, 10000, "Sample", 0)
        assert abs(e.mean()) < 0.05
        assert set(e) == {-1.0, 1.0}

    def test_topk(self):
        w = np.array([0.1, 0.5, 0.15, 0.25])
        e, wt = errors_from_weights(w, np.array([10.0, 20.0, 30.0, 40.0]), 2, "TopK")
        np.testing.assert_array_equal(e, [20.0, 40.0])
        np.testing.assert_allclose(wt, [0.5 / 0.75, 0.25 / 0.75])
        with pytest.raises(ValueError):
            errors_from_weights(w, np.zeros(4), 5, "TopK")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            errors_from_weights(np.ones(2) / 2, np.zeros(2), 1, "Greedy")


class TestIntervals:
    def test_level_probs(self):
        p = level_probs()
        assert len(p) == 18
        np.testing.assert_allclose(p[-2:], [0.05, 0.95])
        np.testing.assert_allclose(p[:2], [0.45, 0.55])

    def test_symmetric_two_point(self):
        errors = np.array([-1.0] * 500 + [1.0] * 500)
        mean, lo, hi = correct_and_interval(2.0, errors)
        assert mean == 2.0
        np.testing.assert_array_equal(lo, np.full(9, 1.0))
        np.testing.assert_array_equal(hi, np.full(9, 3.0))

    def test_zero_errors(self):
        mean, lo, hi = correct_and_interval(-4.0, np.zeros(100))
        assert mean == -4.0 and np.all(lo == -4.0) and np.all(hi == -4.0)

    def test_weighted_shift(self):
        mean, _, _ = correct_and_interval(0.0, np.array([1.0, 3.0]), np.array([0.75, 0.25]))
        assert mean == pytest.approx(1.5)

    def test_empty(self):
        with pytest.raises(ValueError):
            correct_and_interval(0.0, np.array([]))

    def test_nesting_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            errors = rng.standard_normal(rng.integers(1, 60)) * rng.uniform(0.1, 5)
            _, lo, hi = correct_and_interval(rng.normal(), errors)
            assert np.all(np.diff(lo) <= 1e-12)
            assert np.all(np.diff(hi) >= -1e-12)
            assert np.all(lo <= hi)


class TestEvaluation:
    @pytest.fixture(scope="class")
    @classmethod
    def perfect(cls):
        a = np.array([[0.99, 0.01, 0, 0], [0, 0.98, 0, 0], [0, 0, 1.0, 0], [0.01, 0, 0, 0.97]])
        pred = LinearMap(a)
        x0 = np.random.default_rng(0).uniform(1, 2, (3, 4))
        traj = np.empty((3, 300, 4))
        traj[:, 0] = x0
        for t in range(1, 300):
            traj[:, t] = pred.predict(traj[:, t - 1])
        ts = _set(traj, ids=np.array([4, 7, 9]))
        pools = build_context_sets(ts, _set(traj, Role.AUTOREGRESSIVE), 0)
        cfgs = [CorrectorConfig(seq_len=10, epochs=1, hidden=(6,), memory_size=200,
                                n_samples=50)] * 4
        return pred, ts, HopcastCorrector.fit(pools, cfgs, 0)

    def test_perfect_predictor(self, perfect):
        pred, ts, corr = perfect
        sheet = corr.evaluate(pred, ts)
        assert sheet.lower.shape == (3, 300, 4, 9)
        np.testing.assert_allclose(sheet.corrected, ts.data, rtol=1e-12)
        np.testing.assert_allclose(sheet.lower, sheet.upper)
        np.testing.assert_array_equal(sheet.traj_ids, [4, 7, 9])

    def test_one_model_per_channel(self, perfect):
        pred, ts, corr = perfect
        with pytest.raises(ValueError):
            hopcast_evaluate(pred, corr.models[:2], corr.memories[:2], ts)

    def test_batching_independent(self, perfect):
        _, ts, corr = perfect
        model, mem = corr.models[0], corr.memories[0]
        raw = ts.data + np.random.default_rng(1).standard_normal(ts.data.shape)
        rng_mem = AssociationMemory(mem.encoded_keys,
                                    np.random.default_rng(2).standard_normal(len(mem)), mem.rows)
        full = channel_intervals(model, rng_mem, raw, ts.traj_ids, 50, "Sample", 3)
        part = channel_intervals(model, rng_mem, raw[1:], ts.traj_ids[1:], 50, "Sample", 3)
        for a, b in zip(full, part):
            np.testing.assert_array_equal(a[1:], b)

    def test_diverged_rollout_dropped(self, perfect):
        pred, ts, corr = perfect

        class Blowup:
            def predict(self, x):
                out = pred.predict(x)
                return np.where(np.abs(x) > 1e3, np.inf, out)

        data = ts.data.copy()
        data[1, 0] = 1e4
        bad = _set(data, ids=ts.traj_ids)
        sheet = hopcast_evaluate(Blowup(), corr.models, corr.memories, bad, 50)
        np.testing.assert_array_equal(sheet.traj_ids, [4, 9])
        np.testing.assert_array_equal(sheet.dropped, [7])
        assert np.all(np.isfinite(sheet.lower))

    def test_topk_mode(self, perfect):
        _, ts, corr = perfect
        shift, lo, hi = channel_intervals(corr.models[1], corr.memories[1], ts.data[:1],
                                          ts.traj_ids[:1], 20, "TopK")
        assert shift.shape == (1, 300) and lo.shape == (1, 300, 9)

    def test_save(self, perfect, tmp_path):
        corr = perfect[2]
        corr.save(tmp_path)
        assert (tmp_path / "encoder_3.json").exists()
        with np.load(tmp_path / "memory_0.npz") as z:
            np.testing.assert_array_equal(z["values"], corr.memories[0].values)


class TestIntervalSheet:
    def _sheet(self, truth=True):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((2, 3, 2))
        off = np.sort(rng.random((2, 3, 2, 9)), axis=-1)
        return IntervalSheet("hopcast", np.array([5, 1]), raw, raw + 0.1, raw[..., None] - off,
                             raw[..., None] + off, raw + 0.2 if truth else None)

    def test_csv_roundtrip(self, tmp_path):
        sheet = self._sheet()
        sheet.to_csv(tmp_path / "s.csv")
        back = IntervalSheet.from_csv(tmp_path / "s.csv")
        for name in ("raw", "corrected", "lower", "upper", "truth", "traj_ids", "levels"):
            np.testing.assert_array_equal(getattr(back, name), getattr(sheet, name))
        assert back.method == "hopcast"

    def test_csv_without_truth(self, tmp_path):
        self._sheet(False).to_csv(tmp_path / "s.csv")
        assert IntervalSheet.from_csv(tmp_path / "s.csv").truth is None

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            IntervalSheet("x", np.arange(2), np.zeros((2, 3, 1)), np.zeros((2, 3, 1)),
                          np.zeros((2, 3, 2, 9)), np.zeros((2, 3, 1, 9)))

    def test_subset_time(self):
        sub = self._sheet().subset_time(slice(1, None))
        assert sub.shape == (2, 2, 2) and sub.lower.shape == (2, 2, 2, 9)
