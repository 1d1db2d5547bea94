"""Tests for the planted-block synthetic dataset generator."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalrec.ingest import load_interactions, load_modality_features
from modalrec.synthetic import (
    SyntheticError,
    SyntheticSpec,
    generate_synthetic,
    write_synthetic,
)


def small_spec(**overrides) -> SyntheticSpec:
    base = dict(
        n_users=40,
        n_items=20,
        n_blocks=4,
        min_interactions=2,
        max_interactions=4,
        interaction_noise=0.2,
        modalities=(("visual", 5), ("textual", 3)),
        seed=3,
    )
    base.update(overrides)
    return SyntheticSpec(**base)


class TestSpecValidation:
    def test_defaults_are_valid(self):
        spec = SyntheticSpec()
        assert spec.resolved_feature_noise == spec.interaction_noise

    def test_explicit_feature_noise_wins(self):
        spec = small_spec(feature_noise=0.9)
        assert spec.resolved_feature_noise == 0.9

    @pytest.mark.parametrize(
        "overrides, fragment",
        [
            (dict(n_users=0), "n_users"),
            (dict(n_blocks=21), "n_blocks"),
            (dict(min_interactions=3, max_interactions=2), "min_interactions"),
            (dict(interaction_noise=1.5), "interaction_noise"),
            (dict(feature_noise=-0.1), "feature_noise"),
            (dict(popularity_exponent=-1.0), "popularity_exponent"),
            (dict(modalities=()), "modality"),
            (dict(modalities=(("visual", 5), ("visual", 3))), "duplicate"),
            (dict(modalities=(("visual", 0),)), "dims"),
        ],
    )
    def test_rejects_bad_values(self, overrides, fragment):
        with pytest.raises(SyntheticError, match=fragment):
            small_spec(**overrides)


class TestGenerate:
    def test_same_spec_is_deterministic(self):
        a = generate_synthetic(small_spec())
        b = generate_synthetic(small_spec())
        assert np.array_equal(a.interactions.users, b.interactions.users)
        assert np.array_equal(a.interactions.items, b.interactions.items)
        assert np.array_equal(a.interactions.weights, b.interactions.weights)
        for fa, fb in zip(a.features, b.features):
            assert np.array_equal(fa.values, fb.values)

    def test_feature_noise_never_touches_interactions(self):
        clean = generate_synthetic(small_spec(feature_noise=0.0))
        noisy = generate_synthetic(small_spec(feature_noise=1.0))
        assert np.array_equal(clean.interactions.users, noisy.interactions.users)
        assert np.array_equal(clean.interactions.items, noisy.interactions.items)
        assert np.array_equal(clean.interactions.weights, noisy.interactions.weights)
        assert not np.allclose(clean.features[0].values, noisy.features[0].values)

    def test_every_item_and_user_covered(self):
        data = generate_synthetic(small_spec())
        assert np.unique(data.interactions.items).size == 20
        assert np.unique(data.interactions.users).size == 40

    def test_zero_noise_keeps_interactions_in_block(self):
        data = generate_synthetic(small_spec(interaction_noise=0.0))
        inter = data.interactions
        assert np.array_equal(
            data.user_blocks[inter.users], data.item_blocks[inter.items]
        )

    def test_noiseless_features_sit_on_unit_centers(self):
        data = generate_synthetic(small_spec(feature_noise=0.0))
        for feat in data.features:
            norms = np.linalg.norm(feat.values, axis=1)
            assert norms == pytest.approx(np.ones(20))
            for b in range(4):
                rows = feat.values[data.item_blocks == b]
                assert np.allclose(rows, rows[0])

    def test_popularity_skew_concentrates_draws(self):
        spec = small_spec(
            n_users=500,
            n_items=50,
            n_blocks=5,
            min_interactions=3,
            max_interactions=6,
            interaction_noise=0.0,
            popularity_exponent=2.0,
        )
        data = generate_synthetic(spec)
        mass = np.zeros(50)
        np.add.at(mass, data.interactions.items, data.interactions.weights)
        first_rank = np.array([0, 10, 20, 30, 40])
        last_rank = first_rank + 9
        assert mass[first_rank].sum() > 3 * mass[last_rank].sum()

    def test_block_assignments_are_balanced(self):
        data = generate_synthetic(small_spec())
        assert np.array_equal(np.bincount(data.user_blocks), np.full(4, 10))
        assert np.array_equal(np.bincount(data.item_blocks), np.full(4, 5))

    @settings(deadline=None, max_examples=25)
    @given(
        n_users=st.integers(min_value=1, max_value=24),
        n_items=st.integers(min_value=1, max_value=12),
        blocks=st.integers(min_value=1, max_value=12),
        min_inter=st.integers(min_value=1, max_value=3),
        extra=st.integers(min_value=0, max_value=2),
        noise=st.sampled_from([0.0, 0.5, 1.0]),
        expo=st.sampled_from([0.0, 1.0]),
        seed=st.integers(min_value=0, max_value=2**31 - 1),
    )
    def test_generated_tables_are_well_formed(
        self, n_users, n_items, blocks, min_inter, extra, noise, expo, seed
    ):
        spec = SyntheticSpec(
            n_users=n_users,
            n_items=n_items,
            n_blocks=min(blocks, n_users, n_items),
            min_interactions=min_inter,
            max_interactions=min_inter + extra,
            interaction_noise=noise,
            popularity_exponent=expo,
            modalities=(("m", 2),),
            seed=seed,
        )
        data = generate_synthetic(spec)
        inter = data.interactions
        assert inter.users.min() >= 0 and inter.users.max() < n_users
        assert inter.items.min() >= 0 and inter.items.max() < n_items
        assert np.unique(inter.items).size == n_items
        assert np.unique(inter.users).size == n_users
        assert np.array_equal(inter.weights, np.round(inter.weights))
        assert inter.weights.min() >= 1.0
        assert data.features[0].values.shape == (n_items, 2)


class TestWriteSynthetic:
    def test_files_reload_in_alignment(self, tmp_path):
        data = generate_synthetic(small_spec())
        paths = write_synthetic(data, tmp_path)
        reloaded = load_interactions(paths["interactions"])
        inter = data.interactions

        assert np.array_equal(reloaded.weights, inter.weights)
        for r in range(inter.users.size):
            assert reloaded.user_ids[reloaded.users[r]] == f"u{inter.users[r]}"
            assert reloaded.item_ids[reloaded.items[r]] == f"s{inter.items[r]}"

        orig_index = {iid: j for j, iid in enumerate(inter.item_ids)}
        perm = np.array([orig_index[iid] for iid in reloaded.item_ids])
        for feat in data.features:
            loaded = load_modality_features(
                paths[f"features_{feat.modality_id}"],
                feat.modality_id,
                expected_items=reloaded.n_items,
            )
            assert loaded.values == pytest.approx(feat.values[perm], abs=1e-6)

        labels = json.loads(paths["labels"].read_text())
        assert labels["n_blocks"] == 4
        assert labels["user_blocks"] == [int(b) for b in data.user_blocks]
        assert labels["item_blocks"] == [int(data.item_blocks[j]) for j in perm]

    def test_feature_rows_match_reloaded_item_order(self, tmp_path):
        data = generate_synthetic(small_spec(seed=11))
        paths = write_synthetic(data, tmp_path)
        reloaded = load_interactions(paths["interactions"])
        loaded = load_modality_features(paths["features_visual"], "visual")
        for j, iid in enumerate(reloaded.item_ids):
            orig = int(iid[1:])
            assert loaded.values[j] == pytest.approx(
                data.features[0].values[orig], abs=1e-6
            )
