"""Synthetic dataset generator with planted block structure.

Users and items are assigned to latent blocks; most of a user's
interactions land inside the user's block and a noise fraction is drawn
uniformly over all items. In-block draws can follow a long-tail
popularity law so that some items are observed rarely. Each modality
embeds the item blocks as noisy unit centers, so feature informativeness
is tunable independently of the interaction noise: interaction draws and
feature draws use separate random streams of the same seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import InteractionSet, ModalityFeatures, save_interactions, save_modality_features


class SyntheticError(ValueError):
    """Invalid generator specification."""


@dataclass
class SyntheticSpec:
    """Shape and noise knobs for one generated dataset."""

    n_users: int = 1000
    n_items: int = 500
    n_blocks: int = 10
    min_interactions: int = 3
    max_interactions: int = 6
    interaction_noise: float = 0.2
    feature_noise: float | None = None  # defaults to interaction_noise
    popularity_exponent: float = 0.8
    modalities: tuple[tuple[str, int], ...] = (("visual", 8), ("textual", 12))
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1:
            raise SyntheticError("n_users and n_items must be >= 1")
        if not 1 <= self.n_blocks <= min(self.n_users, self.n_items):
            raise SyntheticError(
                f"n_blocks must lie in [1, min(n_users, n_items)], got {self.n_blocks}"
            )
        if self.min_interactions < 1 or self.max_interactions < self.min_interactions:
            raise SyntheticError("need 1 <= min_interactions <= max_interactions")
        if not 0.0 <= self.interaction_noise <= 1.0:
            raise SyntheticError("interaction_noise must lie in [0, 1]")
        if self.feature_noise is not None and not 0.0 <= self.feature_noise <= 1.0:
            raise SyntheticError("feature_noise must lie in [0, 1]")
        if self.popularity_exponent < 0.0:
            raise SyntheticError("popularity_exponent must be >= 0")
        if not self.modalities:
            raise SyntheticError("at least one modality is required")
        ids = [m for m, _ in self.modalities]
        if len(set(ids)) != len(ids):
            raise SyntheticError(f"duplicate modality ids: {ids}")
        if any(dim < 1 for _, dim in self.modalities):
            raise SyntheticError("modality dims must be >= 1")

    @property
    def resolved_feature_noise(self) -> float:
        return self.interaction_noise if self.feature_noise is None else self.feature_noise


@dataclass
class SyntheticDataset:
    """In-memory generated dataset; indices align across all fields."""

    interactions: InteractionSet
    features: list[ModalityFeatures]
    user_blocks: np.ndarray
    item_blocks: np.ndarray
    spec: SyntheticSpec = field(repr=False, default=None)  # type: ignore[assignment]


def _block_of(index: int, count: int, n_blocks: int) -> int:
    return index * n_blocks // count


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Draw interactions and modality features for the given spec.

    Every item is guaranteed at least one interaction. Changing
    feature_noise leaves the interaction tables untouched because features
    come from their own random streams.
    """
    streams = np.random.SeedSequence(spec.seed).spawn(1 + len(spec.modalities))
    rng = np.random.default_rng(streams[0])
    n_u, n_i, n_b = spec.n_users, spec.n_items, spec.n_blocks
    user_blocks = np.array([_block_of(u, n_u, n_b) for u in range(n_u)], dtype=np.int64)
    item_blocks = np.array([_block_of(i, n_i, n_b) for i in range(n_i)], dtype=np.int64)
    block_items = [np.flatnonzero(item_blocks == b) for b in range(n_b)]
    # long-tail in-block popularity: weight falls with block-local rank
    block_probs: list[np.ndarray | None] = [None] * n_b
    if spec.popularity_exponent > 0.0:
        for b in range(n_b):
            w = (1.0 + np.arange(block_items[b].size)) ** -spec.popularity_exponent
            block_probs[b] = w / w.sum()

    counts: dict[tuple[int, int], int] = {}
    order: list[tuple[int, int]] = []

    def record(u: int, i: int) -> None:
        key = (u, i)
        if key in counts:
            counts[key] += 1
        else:
            counts[key] = 1
            order.append(key)

    for u in range(n_u):
        m = int(rng.integers(spec.min_interactions, spec.max_interactions + 1))
        n_off = int(rng.binomial(m, spec.interaction_noise))
        n_in = m - n_off
        pool = block_items[user_blocks[u]]
        take = min(n_in, pool.size)
        if take:
            probs = block_probs[user_blocks[u]]
            for i in rng.choice(pool, size=take, replace=False, p=probs):
                record(u, int(i))
        if n_off:
            for i in rng.integers(0, n_i, size=n_off):
                record(u, int(i))

    # keep the item universe fully covered so files round-trip losslessly
    seen = {i for _, i in order}
    for i in range(n_i):
        if i not in seen:
            donors = np.flatnonzero(user_blocks == item_blocks[i])
            u = int(donors[rng.integers(0, donors.size)])
            record(u, i)

    users = np.array([u for u, _ in order], dtype=np.int64)
    items = np.array([i for _, i in order], dtype=np.int64)
    weights = np.array([counts[k] for k in order], dtype=np.float64)
    interactions = InteractionSet(
        user_ids=[f"u{u}" for u in range(n_u)],
        item_ids=[f"s{i}" for i in range(n_i)],
        users=users,
        items=items,
        weights=weights,
        timestamps=np.full(users.size, np.nan),
    )

    noise = spec.resolved_feature_noise
    features: list[ModalityFeatures] = []
    for (mod, dim), stream in zip(spec.modalities, streams[1:]):
        frng = np.random.default_rng(stream)
        centers = frng.normal(size=(n_b, dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        eps = frng.normal(size=(n_i, dim)) / np.sqrt(dim)
        values = (1.0 - noise) * centers[item_blocks] + noise * eps
        features.append(ModalityFeatures(modality_id=mod, values=values))
    return SyntheticDataset(
        interactions=interactions,
        features=features,
        user_blocks=user_blocks,
        item_blocks=item_blocks,
        spec=spec,
    )


def write_synthetic(dataset: SyntheticDataset, out_dir: str | Path) -> dict[str, Path]:
    """Write interactions, per-modality feature files, and block labels.

    Feature rows and block labels are permuted into the item order a reload
    of the interaction CSV produces, so indices stay aligned across files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inter = dataset.interactions
    item_perm: list[int] = []
    seen: set[int] = set()
    for i in inter.items:
        if int(i) not in seen:
            seen.add(int(i))
            item_perm.append(int(i))
    if len(item_perm) != inter.n_items:
        raise SyntheticError("interactions do not cover every item")
    perm = np.array(item_perm, dtype=np.int64)

    paths: dict[str, Path] = {}
    inter_path = out / "interactions.csv"
    save_interactions(inter, inter_path)
    paths["interactions"] = inter_path
    for feat in dataset.features:
        p = out / f"features_{feat.modality_id}.mmf"
        save_modality_features(
            ModalityFeatures(feat.modality_id, feat.values[perm]), p
        )
        paths[f"features_{feat.modality_id}"] = p
    labels_path = out / "labels.json"
    with open(labels_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "n_blocks": dataset.spec.n_blocks if dataset.spec else int(dataset.item_blocks.max()) + 1,
                "user_blocks": [int(b) for b in dataset.user_blocks],
                "item_blocks": [int(dataset.item_blocks[i]) for i in perm],
            },
            fh,
            sort_keys=True,
        )
    paths["labels"] = labels_path
    return paths
