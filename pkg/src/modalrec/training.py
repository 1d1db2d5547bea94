"""Pairwise ranking training of the multi-modal graph recommender.

The model scores a user-item pair as the inner product of a user embedding
with an enhanced item representation: the base item embedding plus the
L2-normalized output of graph propagation over the fused modality graph.
Training minimizes the pairwise softplus ranking loss with manually derived
gradients; no autodiff framework is involved. Edge topology is frozen
between scheduled rebuilds, and gradients flow through the cosine weights
of retained edges.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .graphs import (
    GraphConfig,
    ModalityTransform,
    SparseItemGraph,
    build_knn_graph,
    normalize_adjacency,
    transform_features,
    unit_rows,
)
from .fusion import ModalityWeights
from .ingest import ModalityFeatures, SplitBundle

CHECKPOINT_MAGIC = b"MMCK1"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the history up to the failure."""

    def __init__(self, message: str, history: list["EpochStats"]):
        super().__init__(message)
        self.history = history


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class TrainConfig:
    """Optimization and model-size knobs."""

    embedding_dim: int = 64
    transform_dim: int = 64
    n_layers: int = 2
    learning_rate: float = 1e-3
    batch_size: int = 512
    epochs: int = 100
    l2_reg: float = 1e-4
    seed: int = 0
    negatives_per_positive: int = 1
    optimizer: str = "adaptive-moment"  # or "sgd"
    patience: int = 10
    val_k: int = 20

    def __post_init__(self):
        if self.embedding_dim < 1 or self.transform_dim < 1:
            raise ValueError("embedding and transform dims must be >= 1")
        if not 0 <= self.n_layers <= 4:
            raise ValueError(f"n_layers must lie in [0, 4], got {self.n_layers}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be non-negative")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if self.optimizer not in ("adaptive-moment", "sgd"):
            raise ValueError(f"optimizer must be adaptive-moment|sgd, got {self.optimizer!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.val_k < 1:
            raise ValueError("val_k must be >= 1")


@dataclass
class ModelParams:
    """All trainable state of the recommender."""

    user_emb: np.ndarray  # (n_users, d)
    item_emb: np.ndarray  # (n_items, d)
    transforms: dict[str, ModalityTransform]
    weights: ModalityWeights | None  # None when no modality features are used

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.user_emb.shape[1]

    @property
    def modality_ids(self) -> tuple[str, ...]:
        return tuple(self.transforms)

    @classmethod
    def init(
        cls,
        n_users: int,
        n_items: int,
        modality_dims: dict[str, int],
        config: TrainConfig,
        rng: np.random.Generator,
    ) -> "ModelParams":
        """Uniform(-0.1, 0.1) embeddings and transform weights, zero biases
        and logits. Draw order is fixed: users, items, then transforms in
        modality order."""
        d = config.embedding_dim
        user_emb = rng.uniform(-0.1, 0.1, size=(n_users, d))
        item_emb = rng.uniform(-0.1, 0.1, size=(n_items, d))
        transforms: dict[str, ModalityTransform] = {}
        for mod, in_dim in modality_dims.items():
            weight = rng.uniform(-0.1, 0.1, size=(config.transform_dim, in_dim))
            transforms[mod] = ModalityTransform(weight=weight, bias=np.zeros(config.transform_dim))
        weights = ModalityWeights.uniform(tuple(modality_dims)) if modality_dims else None
        return cls(user_emb=user_emb, item_emb=item_emb, transforms=transforms, weights=weights)

    def copy(self) -> "ModelParams":
        return ModelParams(
            user_emb=self.user_emb.copy(),
            item_emb=self.item_emb.copy(),
            transforms={
                mod: ModalityTransform(weight=t.weight.copy(), bias=t.bias.copy())
                for mod, t in self.transforms.items()
            },
            weights=None
            if self.weights is None
            else ModalityWeights(self.weights.modality_ids, self.weights.logits.copy()),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array, in a fixed order."""
        out = {"user_emb": self.user_emb, "item_emb": self.item_emb}
        for mod, t in self.transforms.items():
            out[f"transform_weight:{mod}"] = t.weight
            out[f"transform_bias:{mod}"] = t.bias
        if self.weights is not None:
            out["logits"] = self.weights.logits
        return out


@dataclass
class Gradients:
    """Gradient arrays mirroring ModelParams.as_dict keys."""

    arrays: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls({k: np.zeros_like(v) for k, v in params.as_dict().items()})

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        self.arrays[key] = value


def bpr_loss(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Mean softplus of the negative score margin, computed stably."""
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if pos_scores.shape != neg_scores.shape:
        raise ValueError("score arrays must have matching shapes")
    if pos_scores.size == 0:
        raise ValueError("cannot compute a loss over zero pairs")
    return float(np.mean(np.logaddexp(0.0, neg_scores - pos_scores)))


def enhance_items(base: np.ndarray, propagated: np.ndarray) -> np.ndarray:
    """Base embeddings plus the direction of the propagated signal.

    Rows whose propagated signal is exactly zero gain nothing.
    """
    base = np.asarray(base, dtype=np.float64)
    propagated = np.asarray(propagated, dtype=np.float64)
    if base.shape != propagated.shape:
        raise ValueError(f"shape mismatch: {base.shape} vs {propagated.shape}")
    norms = np.linalg.norm(propagated, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return base + propagated / safe[:, None]


def _flat_positive_keys(users: np.ndarray, items: np.ndarray, n_items: int) -> np.ndarray:
    return np.sort(users.astype(np.int64) * n_items + items.astype(np.int64))


def sample_negatives(
    rng: np.random.Generator,
    users: np.ndarray,
    positive_keys: np.ndarray,
    n_items: int,
    max_tries: int = 1000,
) -> np.ndarray:
    """One item per user entry, rejected against that user's positives.

    ``positive_keys`` is the sorted array of user * n_items + item keys for
    all training records. Draws are uniform over items with rejection, so a
    user interacting with every item cannot be satisfied and raises.
    """
    users = np.asarray(users, dtype=np.int64)
    out = rng.integers(0, n_items, size=users.size)
    bad = np.isin(users * n_items + out, positive_keys)
    tries = 0
    while bad.any():
        tries += 1
        if tries > max_tries:
            raise RuntimeError("negative sampling failed; some user interacts with every item")
        redraw = rng.integers(0, n_items, size=int(bad.sum()))
        out[bad] = redraw
        bad_idx = np.flatnonzero(bad)
        still = np.isin(users[bad_idx] * n_items + redraw, positive_keys)
        bad = np.zeros_like(bad)
        bad[bad_idx[still]] = True
    return out


class Pipeline:
    """Per-step forward/backward over the modality graph stack.

    Holds the frozen initial graphs and, after :meth:`rebuild`, the learned
    edge topology per modality plus the union pattern the fused graph lives
    on. ``forward`` recomputes edge weights from the current parameters on
    that fixed topology; ``backward`` returns parameter gradients for a
    given gradient on the enhanced item representations.
    """

    def __init__(
        self,
        features: Sequence[ModalityFeatures],
        graph_config: GraphConfig,
        n_layers: int,
    ):
        if not features:
            raise ValueError("Pipeline requires at least one modality")
        ids = [f.modality_id for f in features]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate modality ids: {ids}")
        sizes = {f.n_items for f in features}
        if len(sizes) != 1:
            raise ValueError(f"modalities disagree on item count: {sorted(sizes)}")
        if n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        self.n_items = sizes.pop()
        self.modality_ids = tuple(ids)
        self.raw = {f.modality_id: f.values for f in features}
        self.config = graph_config
        self.n_layers = n_layers
        self.initial: dict[str, SparseItemGraph] = {}
        for f in features:
            knn = build_knn_graph(f.values, k=graph_config.k, chunk_rows=graph_config.chunk_rows)
            self.initial[f.modality_id] = normalize_adjacency(knn)
        self._topo: dict | None = None

    def rebuild(self, params: ModelParams) -> None:
        """Recompute learned edge topology and the union pattern."""
        n = self.n_items
        learned: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for mod in self.modality_ids:
            if self.config.learned_graph:
                h = transform_features(self.raw[mod], params.transforms[mod])
                g = build_knn_graph(h, k=self.config.k, chunk_rows=self.config.chunk_rows)
                rows, cols, _ = g.edge_arrays()
            else:
                rows = np.empty(0, dtype=np.int64)
                cols = np.empty(0, dtype=np.int64)
            learned[mod] = (rows, cols)
        key_parts = []
        for mod in self.modality_ids:
            r0, c0, _ = self.initial[mod].edge_arrays()
            key_parts.append(r0 * n + c0)
            r1, c1 = learned[mod]
            key_parts.append(r1 * n + c1)
        union = np.unique(np.concatenate(key_parts))
        rows_u = union // n
        cols_u = union % n
        indptr_u = np.searchsorted(rows_u, np.arange(n + 1)).astype(np.int64)
        per_mod: dict[str, dict] = {}
        for mod in self.modality_ids:
            r0, c0, d0 = self.initial[mod].edge_arrays()
            init_on_union = np.zeros(union.size)
            init_on_union[np.searchsorted(union, r0 * n + c0)] = d0
            rows, cols = learned[mod]
            slot = np.searchsorted(union, rows * n + cols)
            # CSR template over the learned pattern, used in the cosine backward
            order = np.argsort(rows * n + cols, kind="stable")
            indptr_l = np.searchsorted(rows[order], np.arange(n + 1)).astype(np.int64)
            per_mod[mod] = {
                "rows": rows[order],
                "cols": cols[order],
                "slot": slot[order],
                "indptr": indptr_l,
                "init_on_union": init_on_union,
            }
        self._topo = {
            "rows": rows_u,
            "cols": cols_u,
            "indptr": indptr_u,
            "per_mod": per_mod,
        }

    def _require_topo(self) -> dict:
        if self._topo is None:
            raise RuntimeError("rebuild() must run before forward()")
        return self._topo

    def forward(self, params: ModelParams) -> tuple[np.ndarray, dict]:
        """Enhanced item representations and the context for backward."""
        topo = self._require_topo()
        cfg = self.config
        n = self.n_items
        assert params.weights is not None
        alpha = params.weights.weights()
        a_data = np.zeros(topo["rows"].size)
        mods_ctx: dict[str, dict] = {}
        for mod, a in zip(self.modality_ids, alpha):
            pm = topo["per_mod"][mod]
            if cfg.learned_graph:
                rows, cols = pm["rows"], pm["cols"]
                h = transform_features(self.raw[mod], params.transforms[mod])
                unit, norms = unit_rows(h)
                cos = np.einsum("ij,ij->i", unit[rows], unit[cols])
                mask = cos > 0
                w = np.where(mask, cos, 0.0)
                deg = np.bincount(rows, weights=w, minlength=n)
                s = np.zeros(n)
                nz = deg > 0
                s[nz] = deg[nz] ** -0.5
                mtilde = w * s[rows] * s[cols]
                a_vec = cfg.sigma * pm["init_on_union"]
                a_vec[pm["slot"]] += (1.0 - cfg.sigma) * mtilde
                mods_ctx[mod] = {
                    "unit": unit, "norms": norms, "cos": cos, "mask": mask,
                    "w": w, "deg": deg, "s": s, "a_vec": a_vec,
                }
            else:
                a_vec = pm["init_on_union"].copy()
                mods_ctx[mod] = {"a_vec": a_vec}
            a_data += a * a_vec
        fused = sp.csr_matrix(
            (a_data, topo["cols"].copy(), topo["indptr"]), shape=(n, n)
        )
        stack = [params.item_emb]
        current = params.item_emb
        for _ in range(self.n_layers):
            current = fused @ current
            stack.append(current)
        final = stack[-1]
        final_norms = np.linalg.norm(final, axis=1)
        safe = np.where(final_norms > 0, final_norms, 1.0)
        enhanced = params.item_emb + final / safe[:, None]
        ctx = {
            "alpha": alpha,
            "fused": fused,
            "stack": stack,
            "final_norms": final_norms,
            "mods": mods_ctx,
        }
        return enhanced, ctx

    def backward(self, params: ModelParams, ctx: dict, grad_enhanced: np.ndarray) -> Gradients:
        """Parameter gradients for a gradient on the enhanced items.

        The user-embedding entry comes back zero; the ranking loss owns it.
        """
        topo = self._require_topo()
        cfg = self.config
        n = self.n_items
        grads = Gradients.zeros_like(params)
        item_grad = grads["item_emb"]
        item_grad += grad_enhanced

        # direction-normalization backward on the final layer
        final = ctx["stack"][-1]
        norms = ctx["final_norms"]
        safe = np.where(norms > 0, norms, 1.0)
        unit_final = final / safe[:, None]
        inner = np.einsum("ij,ij->i", grad_enhanced, unit_final)
        g_layer = (grad_enhanced - inner[:, None] * unit_final) / safe[:, None]
        g_layer = np.where((norms > 0)[:, None], g_layer, 0.0)

        # propagation backward accumulates onto the fused pattern
        fused = ctx["fused"]
        da_data = np.zeros(topo["rows"].size)
        rows_u, cols_u = topo["rows"], topo["cols"]
        for level in range(self.n_layers, 0, -1):
            prev = ctx["stack"][level - 1]
            da_data += np.einsum("ij,ij->i", g_layer[rows_u], prev[cols_u])
            g_layer = fused.T @ g_layer
        item_grad += g_layer

        # softmax fusion backward
        alpha = ctx["alpha"]
        dalpha = np.array([
            da_data @ ctx["mods"][mod]["a_vec"] for mod in self.modality_ids
        ])
        if "logits" in grads.arrays:
            grads["logits"][...] = alpha * (dalpha - float(alpha @ dalpha))

        if not cfg.learned_graph:
            return grads

        for mod, a in zip(self.modality_ids, alpha):
            pm = topo["per_mod"][mod]
            mc = ctx["mods"][mod]
            rows, cols = pm["rows"], pm["cols"]
            if rows.size == 0:
                continue
            g_m = (1.0 - cfg.sigma) * a * da_data[pm["slot"]]
            s, w, deg = mc["s"], mc["w"], mc["deg"]
            # degree-normalization backward: direct term plus row-degree term
            ds = np.bincount(rows, weights=g_m * w * s[cols], minlength=n)
            ds += np.bincount(cols, weights=g_m * w * s[rows], minlength=n)
            dr = np.zeros(n)
            nz = deg > 0
            dr[nz] = -0.5 * deg[nz] ** -1.5 * ds[nz]
            g_w = g_m * s[rows] * s[cols] + dr[rows]
            g_cos = np.where(mc["mask"], g_w, 0.0)
            # cosine backward via the learned-pattern sparse template
            unit = mc["unit"]
            g_mat = sp.csr_matrix((g_cos, cols.copy(), pm["indptr"]), shape=(n, n))
            du = g_mat @ unit + g_mat.T @ unit
            norms_h = mc["norms"]
            safe_h = np.where(norms_h > 0, norms_h, 1.0)
            inner_h = np.einsum("ij,ij->i", du, unit)
            dh = (du - inner_h[:, None] * unit) / safe_h[:, None]
            dh = np.where((norms_h > 0)[:, None], dh, 0.0)
            grads[f"transform_weight:{mod}"][...] = dh.T @ self.raw[mod]
            grads[f"transform_bias:{mod}"][...] = dh.sum(axis=0)
        return grads


def compute_item_representations(
    params: ModelParams,
    features: Sequence[ModalityFeatures],
    graph_config: GraphConfig,
    n_layers: int,
) -> np.ndarray:
    """Canonical enhanced item matrix: fresh topology from the given params."""
    if not features:
        return params.item_emb.copy()
    pipeline = Pipeline(features, graph_config, n_layers)
    pipeline.rebuild(params)
    enhanced, _ = pipeline.forward(params)
    return enhanced


class _SGD:
    def __init__(self, lr: float, l2_reg: float):
        self.lr = lr
        self.l2_reg = l2_reg

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for key, p in params.items():
            p -= self.lr * (grads[key] + 2.0 * self.l2_reg * p)


class _AdaptiveMoment:
    """First/second moment estimates with bias correction."""

    def __init__(self, lr: float, l2_reg: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.l2_reg = l2_reg
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, p in params.items():
            g = grads[key] + 2.0 * self.l2_reg * p
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return _SGD(config.learning_rate, config.l2_reg)
    return _AdaptiveMoment(config.learning_rate, config.l2_reg)


@dataclass
class EpochStats:
    epoch: int  # 1-based
    loss: float
    val_recall: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats]
    best_epoch: int
    best_val_recall: float
    stopped_early: bool
    item_representations: np.ndarray
    mode: str  # "full" | "mf"


def save_history(history: list[EpochStats], path: str | Path, val_k: int = 20) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"epoch,loss,val_recall@{val_k}\n")
        for row in history:
            fh.write(f"{row.epoch},{row.loss!r},{row.val_recall!r}\n")


def _validation_recall(
    user_emb: np.ndarray,
    item_rep: np.ndarray,
    train_sets: list[set[int]],
    val_items: list[np.ndarray],
    k: int,
) -> float:
    """Mean Recall@k over users that hold validation positives. Training
    positives are removed from the candidate pool."""
    totals = []
    scores = user_emb @ item_rep.T
    n_items = item_rep.shape[0]
    for u in range(user_emb.shape[0]):
        relevant = val_items[u]
        if relevant.size == 0:
            continue
        row = scores[u].copy()
        if train_sets[u]:
            row[list(train_sets[u])] = -np.inf
        kk = min(k, n_items)
        top = np.argsort(-row, kind="stable")[:kk]
        hits = np.isin(top, relevant).sum()
        totals.append(hits / relevant.size)
    return float(np.mean(totals)) if totals else 0.0


def _epoch_triples(
    train_users: np.ndarray,
    train_items: np.ndarray,
    positive_keys: np.ndarray,
    n_items: int,
    n_per: int,
    rng_neg: np.random.Generator,
    rng_shuffle: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    users = np.repeat(train_users, n_per)
    pos = np.repeat(train_items, n_per)
    neg = sample_negatives(rng_neg, users, positive_keys, n_items)
    perm = rng_shuffle.permutation(users.size)
    return users[perm], pos[perm], neg[perm]


def train(
    splits: SplitBundle,
    features: Sequence[ModalityFeatures],
    graph_config: GraphConfig | None = None,
    config: TrainConfig | None = None,
) -> TrainResult:
    """Train the recommender on the training split.

    With an empty feature list the graph pipeline is skipped entirely and
    the model reduces to plain embedding factorization with the same loss,
    sampling, and optimizer. Early stopping tracks validation Recall@val_k;
    the best-epoch parameters are returned.
    """
    graph_config = graph_config or GraphConfig()
    config = config or TrainConfig()
    features = list(features)
    for f in features:
        if f.n_items != splits.n_items:
            raise ValueError(
                f"modality {f.modality_id!r} covers {f.n_items} items, "
                f"dataset has {splits.n_items}"
            )
    train_set = splits.train
    n_users, n_items = splits.n_users, splits.n_items
    if train_set.n_records == 0:
        raise ValueError("training split is empty")

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_init = np.random.default_rng(seeds[0])
    rng_neg = np.random.default_rng(seeds[1])
    rng_shuffle = np.random.default_rng(seeds[2])

    modality_dims = {f.modality_id: f.dim for f in features}
    params = ModelParams.init(n_users, n_items, modality_dims, config, rng_init)
    pipeline = Pipeline(features, graph_config, config.n_layers) if features else None
    optimizer = _make_optimizer(config)
    param_views = params.as_dict()

    positive_keys = _flat_positive_keys(train_set.users, train_set.items, n_items)
    train_sets = train_set.item_sets_by_user()
    val_items = splits.validation.items_by_user()

    history: list[EpochStats] = []
    best_val = -np.inf
    best_epoch = 0
    best_params = params.copy()
    bad_epochs = 0
    stopped_early = False

    for epoch in range(config.epochs):
        if pipeline is not None and epoch % graph_config.relearn_every == 0:
            pipeline.rebuild(params)
        users, pos, neg = _epoch_triples(
            train_set.users, train_set.items, positive_keys, n_items,
            config.negatives_per_positive, rng_neg, rng_shuffle,
        )
        loss_sum = 0.0
        for start in range(0, users.size, config.batch_size):
            bu = users[start : start + config.batch_size]
            bi = pos[start : start + config.batch_size]
            bj = neg[start : start + config.batch_size]
            if pipeline is not None:
                enhanced, ctx = pipeline.forward(params)
            else:
                enhanced, ctx = params.item_emb, None
            u_vec = params.user_emb[bu]
            margins = np.einsum("ij,ij->i", u_vec, enhanced[bi] - enhanced[bj])
            batch_sum = float(np.logaddexp(0.0, -margins).sum())
            loss_sum += batch_sum
            if not np.isfinite(batch_sum):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}", history
                )
            dmargin = -_sigmoid(-margins) / bu.size
            grad_enhanced = np.zeros_like(enhanced)
            np.add.at(grad_enhanced, bi, dmargin[:, None] * u_vec)
            np.add.at(grad_enhanced, bj, -dmargin[:, None] * u_vec)
            if pipeline is not None:
                grads = pipeline.backward(params, ctx, grad_enhanced)
            else:
                grads = Gradients.zeros_like(params)
                grads["item_emb"] += grad_enhanced
            user_grad = grads["user_emb"]
            np.add.at(user_grad, bu, dmargin[:, None] * (enhanced[bi] - enhanced[bj]))
            optimizer.step(param_views, grads.arrays)
        epoch_loss = loss_sum / users.size

        if pipeline is not None:
            item_rep, _ = pipeline.forward(params)
        else:
            item_rep = params.item_emb
        val_recall = _validation_recall(
            params.user_emb, item_rep, train_sets, val_items, config.val_k
        )
        history.append(EpochStats(epoch=epoch + 1, loss=epoch_loss, val_recall=val_recall))
        if val_recall > best_val:
            best_val = val_recall
            best_epoch = epoch + 1
            best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                stopped_early = True
                break

    final_rep = compute_item_representations(
        best_params, features, graph_config, config.n_layers
    )
    return TrainResult(
        params=best_params,
        history=history,
        best_epoch=best_epoch,
        best_val_recall=float(best_val),
        stopped_early=stopped_early,
        item_representations=final_rep,
        mode="full" if features else "mf",
    )


def train_mf(
    splits: SplitBundle,
    config: TrainConfig | None = None,
) -> TrainResult:
    """Plain embedding-factorization baseline under the same protocol.

    Shares the sampling, shuffling, optimizer, and early-stopping behavior
    with :func:`train` so the two are directly comparable; the item side is
    just the embedding table.
    """
    config = config or TrainConfig()
    train_set = splits.train
    n_users, n_items = splits.n_users, splits.n_items
    if train_set.n_records == 0:
        raise ValueError("training split is empty")

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_init = np.random.default_rng(seeds[0])
    rng_neg = np.random.default_rng(seeds[1])
    rng_shuffle = np.random.default_rng(seeds[2])

    d = config.embedding_dim
    user_emb = rng_init.uniform(-0.1, 0.1, size=(n_users, d))
    item_emb = rng_init.uniform(-0.1, 0.1, size=(n_items, d))
    optimizer = _make_optimizer(config)
    param_views = {"user_emb": user_emb, "item_emb": item_emb}

    positive_keys = _flat_positive_keys(train_set.users, train_set.items, n_items)
    train_sets = train_set.item_sets_by_user()
    val_items = splits.validation.items_by_user()

    history: list[EpochStats] = []
    best_val = -np.inf
    best_epoch = 0
    best_snapshot = (user_emb.copy(), item_emb.copy())
    bad_epochs = 0
    stopped_early = False

    for epoch in range(config.epochs):
        users, pos, neg = _epoch_triples(
            train_set.users, train_set.items, positive_keys, n_items,
            config.negatives_per_positive, rng_neg, rng_shuffle,
        )
        loss_sum = 0.0
        for start in range(0, users.size, config.batch_size):
            bu = users[start : start + config.batch_size]
            bi = pos[start : start + config.batch_size]
            bj = neg[start : start + config.batch_size]
            u_vec = user_emb[bu]
            margins = np.einsum("ij,ij->i", u_vec, item_emb[bi] - item_emb[bj])
            batch_sum = float(np.logaddexp(0.0, -margins).sum())
            loss_sum += batch_sum
            if not np.isfinite(batch_sum):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}", history
                )
            dmargin = -_sigmoid(-margins) / bu.size
            item_grad = np.zeros_like(item_emb)
            np.add.at(item_grad, bi, dmargin[:, None] * u_vec)
            np.add.at(item_grad, bj, -dmargin[:, None] * u_vec)
            user_grad = np.zeros_like(user_emb)
            np.add.at(user_grad, bu, dmargin[:, None] * (item_emb[bi] - item_emb[bj]))
            optimizer.step(param_views, {"user_emb": user_grad, "item_emb": item_grad})
        epoch_loss = loss_sum / users.size

        val_recall = _validation_recall(user_emb, item_emb, train_sets, val_items, config.val_k)
        history.append(EpochStats(epoch=epoch + 1, loss=epoch_loss, val_recall=val_recall))
        if val_recall > best_val:
            best_val = val_recall
            best_epoch = epoch + 1
            best_snapshot = (user_emb.copy(), item_emb.copy())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                stopped_early = True
                break

    params = ModelParams(
        user_emb=best_snapshot[0],
        item_emb=best_snapshot[1],
        transforms={},
        weights=None,
    )
    return TrainResult(
        params=params,
        history=history,
        best_epoch=best_epoch,
        best_val_recall=float(best_val),
        stopped_early=stopped_early,
        item_representations=params.item_emb.copy(),
        mode="mf",
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def save_checkpoint(params: ModelParams, path: str | Path, meta: dict | None = None) -> None:
    """Write params as a versioned binary: magic, meta JSON, float64 payloads.

    Payload order is user_emb, item_emb, then per modality weight and bias,
    then logits. Arrays are stored at full precision so a load reproduces
    the saved model bit for bit.
    """
    mods = [
        {"id": mod, "out_dim": t.out_dim, "in_dim": t.in_dim}
        for mod, t in params.transforms.items()
    ]
    header = {
        "n_users": params.n_users,
        "n_items": params.n_items,
        "embedding_dim": params.embedding_dim,
        "modalities": mods,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.user_emb.astype("<f8").tobytes(order="C"))
        fh.write(params.item_emb.astype("<f8").tobytes(order="C"))
        for t in params.transforms.values():
            fh.write(t.weight.astype("<f8").tobytes(order="C"))
            fh.write(t.bias.astype("<f8").tobytes(order="C"))
        if params.weights is not None:
            fh.write(params.weights.logits.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns the params and the stored meta dict."""
    raw = Path(path).read_bytes()
    fixed = len(CHECKPOINT_MAGIC) + 12
    if len(raw) < fixed or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<IQ", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = fixed
    if len(raw) < offset + meta_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    offset += meta_len
    n_users = int(header["n_users"])
    n_items = int(header["n_items"])
    d = int(header["embedding_dim"])
    mods = header["modalities"]

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + count * 8
        if len(raw) < end:
            raise CheckpointError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset = end
        return arr.astype(np.float64)

    user_emb = take((n_users, d))
    item_emb = take((n_items, d))
    transforms: dict[str, ModalityTransform] = {}
    for m in mods:
        weight = take((int(m["out_dim"]), int(m["in_dim"])))
        bias = take((int(m["out_dim"]),))
        transforms[str(m["id"])] = ModalityTransform(weight=weight, bias=bias)
    weights = None
    if mods:
        logits = take((len(mods),))
        weights = ModalityWeights(tuple(str(m["id"]) for m in mods), logits)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    params = ModelParams(
        user_emb=user_emb, item_emb=item_emb, transforms=transforms, weights=weights
    )
    return params, dict(header.get("meta", {}))
