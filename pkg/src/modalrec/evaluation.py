"""Top-K ranking evaluation with warm and cold user segments.

Protocol: for each user the candidate pool is every item minus that user's
training positives; candidates are ranked by score and hit-based metrics
are averaged over users that hold at least one held-out positive. Pointwise
error metrics treat the sigmoid of a score as a probability against binary
targets built from held-out positives and an equal number of sampled
unobserved items.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import SplitBundle

logger = logging.getLogger(__name__)

PROTOCOL_NOTE = (
    "all-ranking over items not seen in training; pointwise errors compare "
    "sigmoid scores against 1 for held-out positives and 0 for an equal "
    "count of sampled unobserved items"
)


class EvaluationError(ValueError):
    """Invalid metric input."""


def mae(predicted: np.ndarray, actual: np.ndarray) -> float:
    """Mean absolute error."""
    predicted, actual = _paired(predicted, actual)
    return float(np.mean(np.abs(predicted - actual)))


def rmse(predicted: np.ndarray, actual: np.ndarray) -> float:
    """Root mean squared error."""
    predicted, actual = _paired(predicted, actual)
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def _paired(predicted, actual) -> tuple[np.ndarray, np.ndarray]:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise EvaluationError(f"shape mismatch: {predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise EvaluationError("cannot score zero pairs")
    return predicted, actual


def _check_ranked(ranked, relevant, k) -> tuple[np.ndarray, set[int]]:
    ranked = np.asarray(ranked, dtype=np.int64)
    if ranked.ndim != 1:
        raise EvaluationError("ranking must be 1-D")
    rel = {int(i) for i in relevant}
    if not rel:
        raise EvaluationError("relevant set must be non-empty")
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    return ranked, rel


def precision_recall_at_k(ranked, relevant, k: int) -> tuple[float, float]:
    """Fraction of the cut that is relevant, fraction of relevant retrieved."""
    ranked, rel = _check_ranked(ranked, relevant, k)
    cut = ranked[:k]
    hits = sum(1 for i in cut if int(i) in rel)
    return hits / k, hits / len(rel)


def average_precision(ranked, relevant, k: int) -> float:
    """Mean of precision-at-hit-positions, normalized by the attainable hits."""
    ranked, rel = _check_ranked(ranked, relevant, k)
    cut = ranked[:k]
    hits = 0
    total = 0.0
    for pos, item in enumerate(cut, start=1):
        if int(item) in rel:
            hits += 1
            total += hits / pos
    attainable = min(len(rel), k)
    return total / attainable


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-gain NDCG with the usual logarithmic position discount."""
    ranked, rel = _check_ranked(ranked, relevant, k)
    cut = ranked[:k]
    dcg = sum(1.0 / np.log2(pos + 1) for pos, item in enumerate(cut, start=1) if int(item) in rel)
    ideal = sum(1.0 / np.log2(pos + 1) for pos in range(1, min(len(rel), k) + 1))
    return float(dcg / ideal)


def rank_items(scores: np.ndarray, exclude=None, k: int | None = None) -> np.ndarray:
    """Item indices by descending score; ties break on the smaller index.

    ``exclude`` removes items from the ranking entirely.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise EvaluationError("scores must be 1-D")
    order = np.argsort(-scores, kind="stable")
    if exclude:
        mask = np.ones(scores.size, dtype=bool)
        mask[list(exclude)] = False
        order = order[mask[order]]
    return order if k is None else order[:k]


@dataclass
class SegmentMetrics:
    """Averaged metrics over one user segment."""

    n_users: int
    metrics: dict[str, dict[int, float]]  # metric -> k -> mean value
    mae: float | None
    rmse: float | None


@dataclass
class EvalReport:
    """Evaluation outcome across segments, serializable to JSON and CSV."""

    which: str
    ks: tuple[int, ...]
    segments: dict[str, SegmentMetrics]
    protocol: str = PROTOCOL_NOTE

    def to_dict(self) -> dict:
        segs = {}
        for name, seg in self.segments.items():
            segs[name] = {
                "n_users": seg.n_users,
                "mae": seg.mae,
                "rmse": seg.rmse,
                "metrics": {
                    metric: {str(k): v for k, v in per_k.items()}
                    for metric, per_k in seg.metrics.items()
                },
            }
        return {
            "which": self.which,
            "ks": list(self.ks),
            "protocol": self.protocol,
            "segments": segs,
        }

    def save_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def save_csv(self, path: str | Path) -> None:
        """Flat rows: segment,K,metric,value. Error metrics carry no K."""
        rows = []
        for name in sorted(self.segments):
            seg = self.segments[name]
            for metric in sorted(seg.metrics):
                for k in sorted(seg.metrics[metric]):
                    rows.append((name, str(k), metric, seg.metrics[metric][k]))
            if seg.mae is not None:
                rows.append((name, "", "mae", seg.mae))
            if seg.rmse is not None:
                rows.append((name, "", "rmse", seg.rmse))
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["segment", "K", "metric", "value"])
            for name, k, metric, value in rows:
                writer.writerow([name, k, metric, repr(float(value))])


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def evaluate_all_ranking(
    user_emb: np.ndarray,
    item_rep: np.ndarray,
    splits: SplitBundle,
    ks: tuple[int, ...] = (5, 10, 15),
    which: str = "test",
    seed: int = 0,
) -> EvalReport:
    """Rank every unseen item per user and average top-K metrics.

    Segments: ``all`` covers every evaluated user, ``warm`` and ``cold``
    partition them by the bundle's cold-user flags. Users without held-out
    positives are skipped. A requested K larger than a user's candidate
    pool is clamped to the pool size for that user.
    """
    user_emb = np.asarray(user_emb, dtype=np.float64)
    item_rep = np.asarray(item_rep, dtype=np.float64)
    if which not in ("test", "validation"):
        raise EvaluationError(f"which must be test|validation, got {which!r}")
    ks = tuple(int(k) for k in ks)
    if not ks or any(k < 1 for k in ks):
        raise EvaluationError(f"ks must be positive, got {ks}")
    n_users, n_items = user_emb.shape[0], item_rep.shape[0]
    if n_users != splits.n_users or n_items != splits.n_items:
        raise EvaluationError(
            f"embeddings cover {n_users} users x {n_items} items, "
            f"bundle has {splits.n_users} x {splits.n_items}"
        )

    held_out = (splits.test if which == "test" else splits.validation).items_by_user()
    train_sets = splits.train.item_sets_by_user()
    all_pos = [set(ts) for ts in train_sets]
    for part in (splits.validation, splits.test):
        for u, i in zip(part.users, part.items):
            all_pos[int(u)].add(int(i))

    rng = np.random.default_rng(seed)
    metric_names = ("precision", "recall", "map", "ndcg")
    acc: dict[str, dict[str, dict[int, list[float]]]] = {}
    errs: dict[str, list[np.ndarray]] = {}
    counts: dict[str, int] = {}
    for seg in ("all", "warm", "cold"):
        acc[seg] = {m: {k: [] for k in ks} for m in metric_names}
        errs[seg] = []
        counts[seg] = 0

    scores = user_emb @ item_rep.T
    clamped = False
    for u in range(n_users):
        relevant = held_out[u]
        if relevant.size == 0:
            continue
        ranking = rank_items(scores[u], exclude=train_sets[u])
        n_candidates = ranking.size
        segs = ("all", "cold" if u in splits.cold_user_ids else "warm")
        rel_set = set(map(int, relevant))
        per_user: dict[str, dict[int, float]] = {m: {} for m in metric_names}
        for k in ks:
            kk = min(k, n_candidates)
            if kk < k:
                clamped = True
            p, r = precision_recall_at_k(ranking, rel_set, kk)
            per_user["precision"][k] = p
            per_user["recall"][k] = r
            per_user["map"][k] = average_precision(ranking, rel_set, kk)
            per_user["ndcg"][k] = ndcg_at_k(ranking, rel_set, kk)
        # pointwise error pairs: held-out positives and matched negatives
        negatives = _draw_unobserved(rng, all_pos[u], n_items, relevant.size)
        pred = _stable_sigmoid(np.concatenate([scores[u][relevant], scores[u][negatives]]))
        truth = np.concatenate([np.ones(relevant.size), np.zeros(negatives.size)])
        for seg in segs:
            counts[seg] += 1
            errs[seg].append(np.abs(pred - truth))
            for m in metric_names:
                for k in ks:
                    acc[seg][m][k].append(per_user[m][k])
    if clamped:
        logger.warning("some users have fewer candidates than the largest K; clamped")

    segments: dict[str, SegmentMetrics] = {}
    for seg in ("all", "warm", "cold"):
        if counts[seg] == 0:
            segments[seg] = SegmentMetrics(n_users=0, metrics={}, mae=None, rmse=None)
            continue
        means = {
            m: {k: float(np.mean(acc[seg][m][k])) for k in ks} for m in metric_names
        }
        residuals = np.concatenate(errs[seg])
        segments[seg] = SegmentMetrics(
            n_users=counts[seg],
            metrics=means,
            mae=float(np.mean(residuals)),
            rmse=float(np.sqrt(np.mean(residuals**2))),
        )
    return EvalReport(which=which, ks=ks, segments=segments)


def _draw_unobserved(
    rng: np.random.Generator, positives: set[int], n_items: int, count: int
) -> np.ndarray:
    """Sample items the user never touched in any split, with replacement
    rejection; falls back to the full complement when it is small."""
    if n_items - len(positives) <= 0:
        raise EvaluationError("a user interacts with every item; cannot draw negatives")
    if n_items - len(positives) <= count:
        pool = np.array(sorted(set(range(n_items)) - positives), dtype=np.int64)
        return pool[rng.integers(0, pool.size, size=count)]
    out = rng.integers(0, n_items, size=count)
    for _ in range(1000):
        bad = np.fromiter((int(i) in positives for i in out), dtype=bool, count=count)
        if not bad.any():
            return out
        out[bad] = rng.integers(0, n_items, size=int(bad.sum()))
    raise EvaluationError("negative drawing failed to converge")
