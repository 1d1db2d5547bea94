"""Item-item graph construction.

Per modality: cosine similarity over item features, top-k sparsification
with non-positive edges dropped, symmetric degree normalization, and an
optional learned variant built from linearly transformed features. A skip
connection blends the frozen initial graph with the learned one.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Invalid graph construction input."""


@dataclass
class GraphConfig:
    """Knobs for modality graph construction and refinement."""

    k: int = 10
    sigma: float = 0.7  # skip-connection weight on the frozen initial graph
    chunk_rows: int = 1024
    learned_graph: bool = True
    relearn_every: int = 1  # epochs between kNN topology rebuilds
    rounds: int = 1  # reserved; a single refinement round is supported

    def __post_init__(self):
        if self.k < 1:
            raise GraphError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.sigma <= 1.0:
            raise GraphError(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.chunk_rows < 1:
            raise GraphError(f"chunk_rows must be >= 1, got {self.chunk_rows}")
        if self.relearn_every < 1:
            raise GraphError(f"relearn_every must be >= 1, got {self.relearn_every}")
        if self.rounds != 1:
            raise GraphError(f"only a single refinement round is supported, got {self.rounds}")


@dataclass
class SparseItemGraph:
    """Weighted directed item-item graph in CSR form, no self-loops."""

    n_items: int
    adjacency: sp.csr_matrix

    def __post_init__(self):
        adj = sp.csr_matrix(self.adjacency, dtype=np.float64)
        adj.sort_indices()
        if adj.shape != (self.n_items, self.n_items):
            raise GraphError(f"adjacency shape {adj.shape} != ({self.n_items}, {self.n_items})")
        if adj.nnz and adj.diagonal().any():
            raise GraphError("self-loops are not allowed")
        if adj.nnz and not np.isfinite(adj.data).all():
            raise GraphError("adjacency weights must be finite")
        self.adjacency = adj

    @property
    def nnz(self) -> int:
        return self.adjacency.nnz

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, cols, weights) in CSR order."""
        adj = self.adjacency
        rows = np.repeat(np.arange(self.n_items), np.diff(adj.indptr))
        return rows, adj.indices.copy(), adj.data.copy()

    def out_degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()


def save_graph(graph: SparseItemGraph, path: str | Path) -> None:
    """Write edges as src,dst,weight CSV plus a .meta.json sidecar."""
    path = Path(path)
    rows, cols, weights = graph.edge_arrays()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        for r, c, w in zip(rows, cols, weights):
            writer.writerow([int(r), int(c), repr(float(w))])
    sidecar = path.with_name(path.name + ".meta.json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({"n_items": graph.n_items, "nnz": int(graph.nnz)}, fh, sort_keys=True)


def load_graph(path: str | Path) -> SparseItemGraph:
    path = Path(path)
    sidecar = path.with_name(path.name + ".meta.json")
    if not sidecar.exists():
        raise GraphError(f"{sidecar}: graph sidecar missing")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    n_items = int(meta["n_items"])
    rows: list[int] = []
    cols: list[int] = []
    weights: list[float] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["src", "dst", "weight"]:
            raise GraphError(f"{path}: expected header src,dst,weight")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append(int(row[0]))
                cols.append(int(row[1]))
                weights.append(float(row[2]))
            except (ValueError, IndexError) as e:
                raise GraphError(f"{path}: line {lineno}: bad edge row") from e
    adj = sp.csr_matrix(
        (weights, (rows, cols)), shape=(n_items, n_items), dtype=np.float64
    )
    return SparseItemGraph(n_items=n_items, adjacency=adj)


@dataclass
class ModalityTransform:
    """Trainable affine map applied to raw modality features."""

    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise GraphError("transform weight must be 2-D")
        if self.bias.shape != (self.weight.shape[0],):
            raise GraphError(
                f"bias shape {self.bias.shape} incompatible with weight {self.weight.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def transform_features(values: np.ndarray, transform: ModalityTransform) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[1] != transform.in_dim:
        raise GraphError(
            f"feature dim {values.shape[1]} != transform input dim {transform.in_dim}"
        )
    return values @ transform.weight.T + transform.bias


def unit_rows(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized copy and the row norms; zero rows stay zero."""
    norms = np.linalg.norm(values, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return values / safe[:, None], norms


def cosine_on_edges(values: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Cosine similarity for an explicit edge list (zero rows give zero)."""
    unit, _ = unit_rows(np.asarray(values, dtype=np.float64))
    return np.einsum("ij,ij->i", unit[rows], unit[cols])


def _topk_row(sims: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties at the boundary prefer the
    smaller index. Assumes the self entry is already -inf."""
    n = sims.size
    if k >= n:
        return np.flatnonzero(sims > -np.inf)
    kth = np.partition(sims, n - k)[n - k]
    above = np.flatnonzero(sims > kth)
    need = k - above.size
    sel = np.concatenate([above, np.flatnonzero(sims == kth)[:need]])
    sel.sort()
    return sel


def build_knn_graph(
    values: np.ndarray, k: int = 10, chunk_rows: int = 1024
) -> SparseItemGraph:
    """Directed top-k cosine graph over item feature rows.

    Similarities are computed in row chunks so the dense item-by-item matrix
    is never materialized. Each item keeps its k most similar neighbors
    (excluding itself); non-positive similarities are suppressed, so rows
    with fewer than k positive neighbors keep fewer edges and all-zero
    feature rows keep none.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise GraphError("feature matrix must be 2-D")
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    if chunk_rows < 1:
        raise GraphError(f"chunk_rows must be >= 1, got {chunk_rows}")
    n = values.shape[0]
    unit, _ = unit_rows(values)
    indptr = np.zeros(n + 1, dtype=np.int64)
    index_chunks: list[np.ndarray] = []
    data_chunks: list[np.ndarray] = []
    for start in range(0, n, chunk_rows):
        stop = min(start + chunk_rows, n)
        sims = unit[start:stop] @ unit.T
        for r in range(start, stop):
            row = sims[r - start]
            row[r] = -np.inf  # no self edge
            if n == 1:
                indptr[r + 1] = indptr[r]
                continue
            sel = _topk_row(row, k)
            keep = sel[row[sel] > 0.0]
            indptr[r + 1] = indptr[r] + keep.size
            index_chunks.append(keep.astype(np.int64))
            data_chunks.append(row[keep])
    indices = np.concatenate(index_chunks) if index_chunks else np.empty(0, np.int64)
    data = np.concatenate(data_chunks) if data_chunks else np.empty(0, np.float64)
    adj = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    return SparseItemGraph(n_items=n, adjacency=adj)


def normalize_adjacency(graph: SparseItemGraph) -> SparseItemGraph:
    """Symmetric degree scaling: weight_ij / sqrt(deg_i * deg_j).

    Degrees are out-degree (row) sums of the non-negative adjacency; rows
    and columns with zero degree are left untouched at zero scale.
    """
    adj = graph.adjacency
    if adj.nnz and adj.data.min() < 0:
        raise GraphError("normalization requires non-negative edge weights")
    degrees = np.asarray(adj.sum(axis=1)).ravel()
    scale = np.zeros_like(degrees)
    nz = degrees > 0
    scale[nz] = 1.0 / np.sqrt(degrees[nz])
    rows = np.repeat(np.arange(graph.n_items), np.diff(adj.indptr))
    data = adj.data * scale[rows] * scale[adj.indices]
    out = sp.csr_matrix((data, adj.indices.copy(), adj.indptr.copy()), shape=adj.shape)
    return SparseItemGraph(n_items=graph.n_items, adjacency=out)


def build_learned_graph(
    values: np.ndarray, transform: ModalityTransform, config: GraphConfig
) -> SparseItemGraph:
    """Normalized top-k graph over transformed features."""
    transformed = transform_features(values, transform)
    raw = build_knn_graph(transformed, k=config.k, chunk_rows=config.chunk_rows)
    return normalize_adjacency(raw)


def blend_graphs(
    initial: SparseItemGraph, learned: SparseItemGraph, sigma: float
) -> SparseItemGraph:
    """Skip connection: sigma * initial + (1 - sigma) * learned."""
    if initial.n_items != learned.n_items:
        raise GraphError(
            f"graph sizes differ: {initial.n_items} vs {learned.n_items}"
        )
    if not 0.0 <= sigma <= 1.0:
        raise GraphError(f"sigma must lie in [0, 1], got {sigma}")
    adj = sigma * initial.adjacency + (1.0 - sigma) * learned.adjacency
    return SparseItemGraph(n_items=initial.n_items, adjacency=sp.csr_matrix(adj))
