"""Loss, enhancement, negative sampling, the training loops, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalrec import (
    CheckpointError,
    GraphConfig,
    ModalityFeatures,
    ModelParams,
    Pipeline,
    TrainConfig,
    TrainingDivergedError,
    bpr_loss,
    cold_start_split,
    compute_item_representations,
    enhance_items,
    generate_synthetic,
    load_checkpoint,
    sample_negatives,
    save_checkpoint,
    save_history,
    train,
    train_mf,
    SyntheticSpec,
)
from modalrec.training import EpochStats, _flat_positive_keys

LN2 = 0.6931471805599453
SOFTPLUS_NEG1 = 0.3132616875182228  # ln(1 + e^-1)


def small_dataset(seed=0, n_users=80, n_items=40):
    spec = SyntheticSpec(
        n_users=n_users, n_items=n_items, n_blocks=4,
        min_interactions=3, max_interactions=6,
        interaction_noise=0.2,
        modalities=(("visual", 6), ("textual", 8)), seed=seed,
    )
    ds = generate_synthetic(spec)
    splits = cold_start_split(ds.interactions, 2, seed=seed, ratios=(0.6, 0.2, 0.2))
    return ds, splits


class TestBprLoss:
    def test_zero_margin_gives_ln2(self):
        assert bpr_loss(np.array([1.0]), np.array([1.0])) == pytest.approx(LN2, abs=1e-15)

    def test_unit_margin_oracle(self):
        assert bpr_loss(np.array([2.0]), np.array([1.0])) == pytest.approx(
            SOFTPLUS_NEG1, abs=1e-15
        )

    def test_mean_over_pairs(self):
        got = bpr_loss(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
        assert got == pytest.approx((LN2 + SOFTPLUS_NEG1) / 2, abs=1e-15)

    def test_stable_at_huge_margins(self):
        assert bpr_loss(np.array([1e4]), np.array([0.0])) == 0.0
        assert bpr_loss(np.array([0.0]), np.array([1e4])) == pytest.approx(1e4)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-20, 20), st.floats(0.001, 10))
    def test_monotone_decreasing_in_margin(self, margin, bump):
        lo = bpr_loss(np.array([margin]), np.array([0.0]))
        hi = bpr_loss(np.array([margin + bump]), np.array([0.0]))
        assert hi < lo

    def test_validation(self):
        with pytest.raises(ValueError):
            bpr_loss(np.ones(2), np.ones(3))
        with pytest.raises(ValueError):
            bpr_loss(np.ones(0), np.ones(0))


class TestEnhanceItems:
    def test_adds_unit_direction_per_row(self):
        base = np.zeros((2, 2))
        prop = np.array([[3.0, 4.0], [0.0, 0.0]])
        got = enhance_items(base, prop)
        np.testing.assert_allclose(got[0], [0.6, 0.8], atol=1e-15)
        np.testing.assert_array_equal(got[1], [0.0, 0.0])

    def test_base_passes_through(self):
        base = np.array([[1.0, -1.0]])
        got = enhance_items(base, np.array([[0.0, 2.0]]))
        np.testing.assert_allclose(got, [[1.0, 0.0]], atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            enhance_items(np.zeros((2, 2)), np.zeros((3, 2)))


class TestSampleNegatives:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_never_returns_a_positive(self, seed):
        rng = np.random.default_rng(seed)
        users = np.repeat(np.arange(6), 4)
        items = rng.integers(0, 12, size=users.size)
        keys = _flat_positive_keys(users, items, 12)
        neg = sample_negatives(np.random.default_rng(seed), users, keys, 12)
        assert not np.isin(users * 12 + neg, keys).any()

    def test_deterministic_for_a_given_stream(self):
        users = np.array([0, 1, 2])
        keys = _flat_positive_keys(users, np.array([0, 1, 2]), 5)
        a = sample_negatives(np.random.default_rng(9), users, keys, 5)
        b = sample_negatives(np.random.default_rng(9), users, keys, 5)
        np.testing.assert_array_equal(a, b)

    def test_saturated_user_raises(self):
        users = np.array([0])
        keys = _flat_positive_keys(np.zeros(3, np.int64), np.arange(3), 3)
        with pytest.raises(RuntimeError, match="every item"):
            sample_negatives(np.random.default_rng(0), users, keys, 3)


class TestModelParams:
    def test_init_is_deterministic(self):
        cfg = TrainConfig(embedding_dim=4, transform_dim=3)
        a = ModelParams.init(5, 6, {"v": 7}, cfg, np.random.default_rng(2))
        b = ModelParams.init(5, 6, {"v": 7}, cfg, np.random.default_rng(2))
        for k, arr in a.as_dict().items():
            np.testing.assert_array_equal(arr, b.as_dict()[k])

    def test_as_dict_key_order(self):
        cfg = TrainConfig(embedding_dim=4, transform_dim=3)
        p = ModelParams.init(5, 6, {"v": 7, "t": 2}, cfg, np.random.default_rng(0))
        assert list(p.as_dict()) == [
            "user_emb", "item_emb",
            "transform_weight:v", "transform_bias:v",
            "transform_weight:t", "transform_bias:t",
            "logits",
        ]

    def test_no_modalities_means_no_fusion_state(self):
        cfg = TrainConfig(embedding_dim=4)
        p = ModelParams.init(5, 6, {}, cfg, np.random.default_rng(0))
        assert p.weights is None
        assert list(p.as_dict()) == ["user_emb", "item_emb"]


def _batch_loss(pipeline, params, user_emb, batch):
    """Ranking loss of a fixed batch against the current parameters."""
    enhanced, _ = pipeline.forward(params)
    u, ipos, ineg = batch
    pos = np.einsum("ij,ij->i", user_emb[u], enhanced[ipos])
    neg = np.einsum("ij,ij->i", user_emb[u], enhanced[ineg])
    return bpr_loss(pos, neg)


class TestPipelineGradients:
    def test_matches_central_differences(self):
        """Spot-check the analytic gradient on a handful of coordinates.

        The acceptance suite sweeps many instances; this pins the machinery
        with a quick run so a regression fails fast.
        """
        rng = np.random.default_rng(11)
        n_users, n_items = 6, 10
        feats = [
            ModalityFeatures("v", rng.normal(size=(n_items, 4))),
            ModalityFeatures("t", rng.normal(size=(n_items, 5))),
        ]
        cfg = TrainConfig(embedding_dim=3, transform_dim=3, n_layers=2, seed=1)
        gcfg = GraphConfig(k=3, chunk_rows=4)
        pipeline = Pipeline(feats, gcfg, cfg.n_layers)
        params = ModelParams.init(
            n_users, n_items, {f.modality_id: f.dim for f in feats}, cfg, rng
        )
        params.weights.logits[:] = rng.normal(scale=0.3, size=2)
        pipeline.rebuild(params)
        batch = (
            rng.integers(0, n_users, size=12),
            rng.integers(0, n_items, size=12),
            rng.integers(0, n_items, size=12),
        )

        enhanced, ctx = pipeline.forward(params)
        u, ipos, ineg = batch
        pos = np.einsum("ij,ij->i", params.user_emb[u], enhanced[ipos])
        neg = np.einsum("ij,ij->i", params.user_emb[u], enhanced[ineg])
        dmargin = -1.0 / (1.0 + np.exp(pos - neg)) / u.size
        grad_enh = np.zeros_like(enhanced)
        np.add.at(grad_enh, ipos, dmargin[:, None] * params.user_emb[u])
        np.add.at(grad_enh, ineg, -dmargin[:, None] * params.user_emb[u])
        grads = pipeline.backward(params, ctx, grad_enh)
        duser = np.zeros_like(params.user_emb)
        np.add.at(duser, u, dmargin[:, None] * (enhanced[ipos] - enhanced[ineg]))
        grads["user_emb"][...] = duser

        h = 1e-6
        checked = 0
        arrays = params.as_dict()
        for name, arr in arrays.items():
            flat = arr.reshape(-1)
            idx = rng.choice(flat.size, size=min(4, flat.size), replace=False)
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                up = _batch_loss(pipeline, params, params.user_emb, batch)
                flat[j] = orig - h
                down = _batch_loss(pipeline, params, params.user_emb, batch)
                flat[j] = orig
                fd = (up - down) / (2 * h)
                an = grads[name].reshape(-1)[j]
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom < 1e-4, (name, j, fd, an)
                checked += 1
        assert checked >= 20


class TestTrainLoop:
    def test_learning_happens_and_result_is_consistent(self):
        ds, splits = small_dataset()
        cfg = TrainConfig(
            embedding_dim=8, transform_dim=8, n_layers=2,
            learning_rate=5e-3, epochs=25, batch_size=64, seed=0, patience=25,
        )
        result = train(splits, ds.features, GraphConfig(k=5, chunk_rows=16), cfg)
        assert result.mode == "full"
        assert 1 <= len(result.history) <= 25
        losses = [h.loss for h in result.history]
        assert losses[-1] < losses[0]
        assert result.best_val_recall == pytest.approx(
            max(h.val_recall for h in result.history)
        )
        assert result.history[result.best_epoch - 1].val_recall == pytest.approx(
            result.best_val_recall
        )
        assert result.item_representations.shape == (splits.n_items, 8)

    def test_item_representations_recomputable_from_params(self):
        ds, splits = small_dataset(seed=1)
        cfg = TrainConfig(
            embedding_dim=6, transform_dim=6, n_layers=1,
            learning_rate=5e-3, epochs=6, batch_size=64, seed=1, patience=6,
        )
        gcfg = GraphConfig(k=4, chunk_rows=16)
        result = train(splits, ds.features, gcfg, cfg)
        again = compute_item_representations(result.params, ds.features, gcfg, cfg.n_layers)
        np.testing.assert_array_equal(again, result.item_representations)

    def test_featureless_training_collapses_to_the_baseline(self):
        _, splits = small_dataset(seed=2)
        cfg = TrainConfig(
            embedding_dim=6, n_layers=0, learning_rate=5e-3,
            epochs=8, batch_size=64, seed=2, patience=8,
        )
        a = train(splits, [], GraphConfig(k=4), cfg)
        b = train_mf(splits, cfg)
        assert [h.loss for h in a.history] == [h.loss for h in b.history]
        np.testing.assert_array_equal(a.params.user_emb, b.params.user_emb)
        np.testing.assert_array_equal(a.params.item_emb, b.params.item_emb)

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_divergence_is_reported(self):
        _, splits = small_dataset(seed=3)
        cfg = TrainConfig(
            embedding_dim=6, learning_rate=1e12, optimizer="sgd",
            epochs=5, batch_size=64, seed=3, l2_reg=1e6,
        )
        with pytest.raises(TrainingDivergedError):
            train_mf(splits, cfg)

    def test_same_seed_reproduces_training(self):
        ds, splits = small_dataset(seed=4)
        cfg = TrainConfig(
            embedding_dim=6, transform_dim=6, n_layers=1,
            learning_rate=5e-3, epochs=5, batch_size=64, seed=4, patience=5,
        )
        gcfg = GraphConfig(k=4, chunk_rows=16)
        a = train(splits, ds.features, gcfg, cfg)
        b = train(splits, ds.features, gcfg, cfg)
        assert [h.loss for h in a.history] == [h.loss for h in b.history]
        np.testing.assert_array_equal(a.params.item_emb, b.params.item_emb)


class TestCheckpoints:
    def test_round_trip_bit_for_bit(self, tmp_path):
        rng = np.random.default_rng(5)
        cfg = TrainConfig(embedding_dim=4, transform_dim=3)
        params = ModelParams.init(5, 7, {"v": 6, "t": 4}, cfg, rng)
        params.weights.logits[:] = rng.normal(size=2)
        p = tmp_path / "model.mmck"
        save_checkpoint(params, p, meta={"mode": "full", "seed": 3})
        got, meta = load_checkpoint(p)
        assert meta == {"mode": "full", "seed": 3}
        for k, arr in params.as_dict().items():
            np.testing.assert_array_equal(arr, got.as_dict()[k])
        assert got.modality_ids == ("v", "t")

    def test_baseline_checkpoint_has_no_fusion_state(self, tmp_path):
        cfg = TrainConfig(embedding_dim=4)
        params = ModelParams.init(3, 4, {}, cfg, np.random.default_rng(0))
        p = tmp_path / "mf.mmck"
        save_checkpoint(params, p)
        got, meta = load_checkpoint(p)
        assert got.weights is None
        assert meta == {}

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk.mmck"
        p.write_bytes(b"PNG....definitely not")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        cfg = TrainConfig(embedding_dim=4)
        params = ModelParams.init(3, 4, {}, cfg, np.random.default_rng(0))
        p = tmp_path / "model.mmck"
        save_checkpoint(params, p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_trailing_garbage_detected(self, tmp_path):
        cfg = TrainConfig(embedding_dim=4)
        params = ModelParams.init(3, 4, {}, cfg, np.random.default_rng(0))
        p = tmp_path / "model.mmck"
        save_checkpoint(params, p)
        p.write_bytes(p.read_bytes() + b"\x00" * 8)
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(p)


class TestHistoryFile:
    def test_format(self, tmp_path):
        history = [EpochStats(1, 0.6931471805599453, 0.125), EpochStats(2, 0.5, 0.25)]
        p = tmp_path / "history.csv"
        save_history(history, p, val_k=20)
        lines = p.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "epoch,loss,val_recall@20"
        assert lines[1] == "1,0.6931471805599453,0.125"
        assert lines[2] == "2,0.5,0.25"
