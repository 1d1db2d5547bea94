"""Softmax fusion of per-modality graphs and embedding propagation.

The fused graph is a convex combination of modality graphs with weights
softmax(logits). Propagation is plain neighborhood averaging under the
fused adjacency: no per-layer transforms or nonlinearities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graphs import SparseItemGraph


class FusionError(ValueError):
    """Invalid fusion or propagation input."""


@dataclass
class ModalityWeights:
    """Trainable importance logits over modalities, one per graph."""

    modality_ids: tuple[str, ...]
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (len(self.modality_ids),):
            raise FusionError(
                f"logits shape {self.logits.shape} != ({len(self.modality_ids)},)"
            )
        if len(self.modality_ids) == 0:
            raise FusionError("at least one modality is required")
        if len(set(self.modality_ids)) != len(self.modality_ids):
            raise FusionError("modality ids must be unique")

    @classmethod
    def uniform(cls, modality_ids: tuple[str, ...] | list[str]) -> "ModalityWeights":
        ids = tuple(modality_ids)
        return cls(modality_ids=ids, logits=np.zeros(len(ids)))

    def weights(self) -> np.ndarray:
        """Softmax of the logits, shifted for stability."""
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.modality_ids, map(float, self.weights())))


def fuse_modalities(
    graphs: dict[str, SparseItemGraph], weights: ModalityWeights
) -> SparseItemGraph:
    """Weighted sum of modality graphs using softmax importance weights."""
    if set(graphs) != set(weights.modality_ids):
        raise FusionError(
            f"graph modalities {sorted(graphs)} != weight modalities "
            f"{sorted(weights.modality_ids)}"
        )
    sizes = {g.n_items for g in graphs.values()}
    if len(sizes) != 1:
        raise FusionError(f"modality graphs disagree on item count: {sorted(sizes)}")
    n_items = sizes.pop()
    alpha = weights.weights()
    fused = None
    for a, mod in zip(alpha, weights.modality_ids):
        term = a * graphs[mod].adjacency
        fused = term if fused is None else fused + term
    return SparseItemGraph(n_items=n_items, adjacency=sp.csr_matrix(fused))


@dataclass
class ConvStack:
    """Layer outputs of a propagation run; layers[0] is the input."""

    layers: list[np.ndarray] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    @property
    def final(self) -> np.ndarray:
        return self.layers[-1]


def graph_convolve(
    graph: SparseItemGraph, embeddings: np.ndarray, n_layers: int
) -> ConvStack:
    """Propagate item embeddings: layer l is adjacency @ layer l-1.

    Returns every layer so training can push gradients back through the
    stack. n_layers = 0 is the identity.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] != graph.n_items:
        raise FusionError(
            f"embeddings shape {embeddings.shape} incompatible with "
            f"{graph.n_items} items"
        )
    if n_layers < 0:
        raise FusionError(f"n_layers must be >= 0, got {n_layers}")
    layers = [embeddings]
    current = embeddings
    for _ in range(n_layers):
        current = graph.adjacency @ current
        if not np.isfinite(current).all():
            raise FusionError("propagation produced non-finite values")
        layers.append(current)
    return ConvStack(layers=layers)
