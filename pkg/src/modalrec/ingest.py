"""Interaction and feature ingestion: CSV/event-log loading, modality
feature files, and deterministic per-user train/validation/test splits."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"MMFV1"

INTERACTION_HEADER = ("user", "item", "timestamp")
EVENT_HEADER = ("object", "service", "user", "t_start", "t_end", "kind")


class IngestError(ValueError):
    """Malformed input data or an invalid split request."""


@dataclass(frozen=True)
class SIoTObject:
    """A networked object: the services it exposes and the users owning it.

    Relationship edges to other objects are carried for inspection but are
    not consumed by the recommender.
    """

    object_id: str
    services: frozenset[str]
    owners: frozenset[str]
    relations: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.services or not self.owners:
            raise IngestError(
                f"object {self.object_id!r} must declare at least one service and one owner"
            )


@dataclass(frozen=True)
class ObjectServiceEvent:
    """One service usage or generation event emitted by an object."""

    object_id: str
    service_id: str
    user_id: str
    t_start: float
    t_end: float
    kind: str  # "usage" | "generation"

    def __post_init__(self):
        if self.kind not in ("usage", "generation"):
            raise IngestError(f"event kind must be usage|generation, got {self.kind!r}")
        if self.t_start > self.t_end:
            raise IngestError(
                f"event ({self.object_id},{self.service_id},{self.user_id}): "
                f"t_start {self.t_start} > t_end {self.t_end}"
            )


@dataclass
class InteractionSet:
    """Sparse implicit-feedback records over dense user/item index spaces.

    ``user_ids[k]`` / ``item_ids[k]`` map dense indices back to raw
    identifiers. Records are unique ``(user, item)`` pairs; ``weights`` hold
    occurrence counts and ``timestamps`` the earliest observed time (NaN if
    absent).
    """

    user_ids: list[str]
    item_ids: list[str]
    users: np.ndarray  # int64, record -> user index
    items: np.ndarray  # int64, record -> item index
    weights: np.ndarray  # float64, >= 1
    timestamps: np.ndarray  # float64, NaN where unknown

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        n = len(self.users)
        if not (len(self.items) == len(self.weights) == len(self.timestamps) == n):
            raise IngestError("record arrays must have equal length")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise IngestError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise IngestError("item index out of range")
            if (self.weights < 1).any():
                raise IngestError("weights must be >= 1")

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_records(self) -> int:
        return len(self.users)

    def user_index(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.user_ids)}

    def item_index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}

    def records(self) -> list[tuple[int, int, float, float | None]]:
        out = []
        for u, i, w, t in zip(self.users, self.items, self.weights, self.timestamps):
            out.append((int(u), int(i), float(w), None if np.isnan(t) else float(t)))
        return out

    def items_by_user(self) -> list[np.ndarray]:
        """Item indices per user, each sorted ascending."""
        order = np.lexsort((self.items, self.users))
        out: list[np.ndarray] = []
        bounds = np.searchsorted(self.users[order], np.arange(self.n_users + 1))
        for u in range(self.n_users):
            out.append(self.items[order[bounds[u] : bounds[u + 1]]])
        return out

    def item_sets_by_user(self) -> list[set[int]]:
        return [set(map(int, row)) for row in self.items_by_user()]

    def subset(self, record_indices: np.ndarray) -> "InteractionSet":
        """A view onto a subset of records; index maps are shared."""
        idx = np.asarray(record_indices, dtype=np.int64)
        return InteractionSet(
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            users=self.users[idx],
            items=self.items[idx],
            weights=self.weights[idx],
            timestamps=self.timestamps[idx],
        )


@dataclass
class ModalityFeatures:
    """Dense item-by-dimension feature matrix for one modality."""

    modality_id: str
    values: np.ndarray  # (n_items, dim) float64
    n_missing_rows: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise IngestError("feature matrix must be 2-D")
        if self.values.shape[1] < 1:
            raise IngestError("feature dim must be positive")
        if not np.isfinite(self.values).all():
            bad = int(np.argwhere(~np.isfinite(self.values).all(axis=1))[0][0])
            raise IngestError(f"non-finite feature value at row {bad}")

    @property
    def n_items(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class SplitBundle:
    """Per-user partition of an InteractionSet plus cold-start flags."""

    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet
    seed: int
    cold_user_ids: frozenset[int] = frozenset()
    cold_item_ids: frozenset[int] = frozenset()

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items


def _aggregate(
    raw_users: list[str],
    raw_items: list[str],
    timestamps: list[float | None],
) -> InteractionSet:
    """Aggregate duplicate (user, item) rows into count weights.

    Index maps follow first appearance order, which makes repeated loads of
    the same file produce identical maps.
    """
    user_ids: list[str] = []
    item_ids: list[str] = []
    umap: dict[str, int] = {}
    imap: dict[str, int] = {}
    agg: dict[tuple[int, int], list[float]] = {}  # (u, i) -> [count, earliest ts]
    order: list[tuple[int, int]] = []
    for raw_u, raw_i, ts in zip(raw_users, raw_items, timestamps):
        if raw_u not in umap:
            umap[raw_u] = len(user_ids)
            user_ids.append(raw_u)
        if raw_i not in imap:
            imap[raw_i] = len(item_ids)
            item_ids.append(raw_i)
        key = (umap[raw_u], imap[raw_i])
        t = np.nan if ts is None else float(ts)
        if key in agg:
            agg[key][0] += 1.0
            prev = agg[key][1]
            if np.isnan(prev) or (not np.isnan(t) and t < prev):
                agg[key][1] = t
        else:
            agg[key] = [1.0, t]
            order.append(key)
    users = np.array([k[0] for k in order], dtype=np.int64)
    items = np.array([k[1] for k in order], dtype=np.int64)
    weights = np.array([agg[k][0] for k in order], dtype=np.float64)
    ts_arr = np.array([agg[k][1] for k in order], dtype=np.float64)
    return InteractionSet(user_ids, item_ids, users, items, weights, ts_arr)


def _read_csv_rows(path: str | Path) -> list[list[str]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return [row for row in csv.reader(fh)]
    except UnicodeDecodeError as exc:
        raise IngestError(f"{path}: non-UTF8 content ({exc})") from exc


def load_interactions(path: str | Path, format: str = "csv") -> InteractionSet:
    """Load implicit feedback from an interaction CSV or an event log.

    Duplicate (user, item) rows aggregate into weight = occurrence count.
    Raises IngestError on malformed rows (with line numbers) and on empty
    input.
    """
    if format == "event_log":
        return events_to_interactions(load_event_log(path))
    if format != "csv":
        raise IngestError(f"unknown interaction format {format!r}")
    rows = _read_csv_rows(path)
    if not rows:
        raise IngestError(f"{path}: empty dataset")
    header = [c.strip() for c in rows[0]]
    if header[:2] != ["user", "item"] or len(header) > 3 or (
        len(header) == 3 and header[2] != "timestamp"
    ):
        raise IngestError(f"{path}: line 1: expected header user,item[,timestamp]")
    has_ts = len(header) == 3
    raw_u: list[str] = []
    raw_i: list[str] = []
    tss: list[float | None] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise IngestError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        u, i = row[0].strip(), row[1].strip()
        if not u or not i:
            raise IngestError(f"{path}: line {lineno}: empty identifier")
        ts: float | None = None
        if has_ts and row[2].strip():
            try:
                ts = float(row[2])
            except ValueError as e:
                raise IngestError(f"{path}: line {lineno}: bad timestamp {row[2]!r}") from e
        raw_u.append(u)
        raw_i.append(i)
        tss.append(ts)
    if not raw_u:
        raise IngestError(f"{path}: empty dataset")
    return _aggregate(raw_u, raw_i, tss)


def save_interactions(interactions: InteractionSet, path: str | Path) -> None:
    """Write the canonical interaction CSV (one row per occurrence).

    Round-trips through :func:`load_interactions`; requires integer weights,
    which holds for any set produced by aggregation.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INTERACTION_HEADER)
        for u, i, w, t in interactions.records():
            count = int(round(w))
            if abs(w - count) > 1e-9 or count < 1:
                raise IngestError(f"non-integer weight {w} cannot round-trip through CSV")
            ts = "" if t is None else repr(t)
            for _ in range(count):
                writer.writerow([interactions.user_ids[u], interactions.item_ids[i], ts])


def load_event_log(path: str | Path) -> list[ObjectServiceEvent]:
    """Parse an object-service event CSV into validated events."""
    rows = _read_csv_rows(path)
    if not rows:
        raise IngestError(f"{path}: empty dataset")
    header = tuple(c.strip() for c in rows[0])
    if header != EVENT_HEADER:
        raise IngestError(f"{path}: line 1: expected header {','.join(EVENT_HEADER)}")
    events: list[ObjectServiceEvent] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 6:
            raise IngestError(f"{path}: line {lineno}: expected 6 fields, got {len(row)}")
        try:
            t0, t1 = float(row[3]), float(row[4])
        except ValueError as e:
            raise IngestError(f"{path}: line {lineno}: bad timestamp") from e
        try:
            events.append(
                ObjectServiceEvent(
                    object_id=row[0].strip(),
                    service_id=row[1].strip(),
                    user_id=row[2].strip(),
                    t_start=t0,
                    t_end=t1,
                    kind=row[5].strip(),
                )
            )
        except IngestError as e:
            raise IngestError(f"{path}: line {lineno}: {e}") from e
    return events


def events_to_interactions(
    events: list[ObjectServiceEvent],
    objects: list[SIoTObject] | None = None,
) -> InteractionSet:
    """Map object-service events onto (user, service) implicit feedback.

    Usage and generation events both count as positive feedback; the weight
    of a (user, service) record is its event count and the timestamp the
    earliest t_start. When an object catalog is given, every event must
    reference a declared object, one of its services, and one of its owners.
    """
    if objects is not None:
        by_id = {o.object_id: o for o in objects}
        for ev in events:
            obj = by_id.get(ev.object_id)
            if obj is None:
                raise IngestError(f"event references unknown object {ev.object_id!r}")
            if ev.service_id not in obj.services:
                raise IngestError(
                    f"event references service {ev.service_id!r} not declared by {ev.object_id!r}"
                )
            if ev.user_id not in obj.owners:
                raise IngestError(
                    f"event references user {ev.user_id!r} not an owner of {ev.object_id!r}"
                )
    raw_u = [ev.user_id for ev in events]
    raw_s = [ev.service_id for ev in events]
    tss: list[float | None] = [ev.t_start for ev in events]
    if not raw_u:
        return InteractionSet([], [], np.empty(0, np.int64), np.empty(0, np.int64),
                              np.empty(0), np.empty(0))
    return _aggregate(raw_u, raw_s, tss)


def load_modality_features(
    path: str | Path,
    modality_id: str,
    expected_items: int | None = None,
    max_missing: int = 0,
) -> ModalityFeatures:
    """Load an item feature matrix (binary MMFV1 or CSV with n_items,dim header).

    When ``expected_items`` (the interaction item count) exceeds the file's
    row count, up to ``max_missing`` trailing items are zero-filled and the
    count is surfaced on the result; a larger shortfall is an error, as is a
    file with more rows than expected.
    """
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(len(FEATURE_MAGIC))
    if head == FEATURE_MAGIC:
        values = _load_features_binary(p)
    else:
        values = _load_features_csv(p)
    missing = 0
    if expected_items is not None and values.shape[0] != expected_items:
        missing = expected_items - values.shape[0]
        if missing < 0:
            raise IngestError(
                f"{path}: feature file has {values.shape[0]} rows for {expected_items} items"
            )
        if missing > max_missing:
            raise IngestError(
                f"{path}: {missing} items lack feature rows (allowance {max_missing})"
            )
        values = np.vstack([values, np.zeros((missing, values.shape[1]))])
        logger.warning("%s: zero-filled %d missing feature rows", path, missing)
    if not np.isfinite(values).all():
        bad = int(np.argwhere(~np.isfinite(values).all(axis=1))[0][0])
        raise IngestError(f"{path}: non-finite feature value at row {bad}")
    return ModalityFeatures(modality_id=modality_id, values=values, n_missing_rows=missing)


def _load_features_binary(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    header_len = len(FEATURE_MAGIC) + 16
    if len(raw) < header_len:
        raise IngestError(f"{path}: truncated feature header")
    n_items, dim = struct.unpack_from("<QQ", raw, len(FEATURE_MAGIC))
    if dim == 0:
        raise IngestError(f"{path}: feature dim must be positive")
    expected = header_len + n_items * dim * 4
    if len(raw) != expected:
        raise IngestError(
            f"{path}: payload length {len(raw) - header_len} does not match "
            f"{n_items}x{dim} float32 matrix"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=header_len).reshape(n_items, dim)
    return values.astype(np.float64)


def _load_features_csv(path: Path) -> np.ndarray:
    rows = _read_csv_rows(path)
    if not rows:
        raise IngestError(f"{path}: empty feature file")
    try:
        n_items, dim = (int(x) for x in rows[0])
    except (ValueError, TypeError) as e:
        raise IngestError(f"{path}: line 1: expected header n_items,dim") from e
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    if len(body) != n_items:
        raise IngestError(f"{path}: header declares {n_items} rows, body has {len(body)}")
    values = np.zeros((n_items, dim))
    for r, row in enumerate(body):
        if len(row) != dim:
            raise IngestError(f"{path}: line {r + 2}: expected {dim} values, got {len(row)}")
        try:
            values[r] = [float(c) for c in row]
        except ValueError as e:
            raise IngestError(f"{path}: line {r + 2}: bad float") from e
    return values


def save_modality_features(features: ModalityFeatures, path: str | Path) -> None:
    """Write the binary feature format (float32 payload)."""
    values = features.values.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", features.n_items, features.dim))
        fh.write(values.tobytes(order="C"))


def _split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Per-user record counts: round val/test, train takes the remainder but
    keeps at least one record."""
    _, rv, rt = ratios
    n_val = int(round(n * rv))
    n_test = int(round(n * rt))
    while n - n_val - n_test < 1:
        if n_test > 0:
            n_test -= 1
        elif n_val > 0:
            n_val -= 1
        else:
            break
    return n - n_val - n_test, n_val, n_test


def split_dataset(
    interactions: InteractionSet,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitBundle:
    """Deterministic per-user shuffled partition into train/validation/test."""
    ratios = tuple(float(r) for r in ratios)  # type: ignore[assignment]
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise IngestError(f"ratios must be three non-negative values, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise IngestError(f"ratios must sum to 1, got {sum(ratios)}")
    if interactions.n_records == 0:
        raise IngestError("cannot split an empty interaction set")
    per_user_records: list[np.ndarray] = [
        np.flatnonzero(interactions.users == u) for u in range(interactions.n_users)
    ]
    for u, recs in enumerate(per_user_records):
        if recs.size == 0:
            raise IngestError(f"user index {u} has zero records")
    rng = np.random.default_rng(seed)
    tr_idx: list[np.ndarray] = []
    va_idx: list[np.ndarray] = []
    te_idx: list[np.ndarray] = []
    for recs in per_user_records:
        perm = recs[rng.permutation(recs.size)]
        n_tr, n_va, n_te = _split_counts(recs.size, ratios)
        tr_idx.append(perm[:n_tr])
        va_idx.append(perm[n_tr : n_tr + n_va])
        te_idx.append(perm[n_tr + n_va :])
        assert perm.size - n_tr - n_va == n_te
    return SplitBundle(
        train=interactions.subset(np.concatenate(tr_idx)),
        validation=interactions.subset(np.concatenate(va_idx))
        if va_idx
        else interactions.subset(np.empty(0, np.int64)),
        test=interactions.subset(np.concatenate(te_idx)),
        seed=seed,
    )


def cold_start_split(
    interactions: InteractionSet,
    min_train_count: int,
    seed: int = 0,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> SplitBundle:
    """split_dataset plus cold flags for users/items with sparse training data."""
    if min_train_count < 1:
        raise IngestError("min_train_count must be >= 1")
    bundle = split_dataset(interactions, ratios=ratios, seed=seed)
    user_counts = np.bincount(bundle.train.users, minlength=interactions.n_users)
    item_counts = np.bincount(bundle.train.items, minlength=interactions.n_items)
    cold_users = frozenset(int(u) for u in np.flatnonzero(user_counts < min_train_count))
    cold_items = frozenset(int(i) for i in np.flatnonzero(item_counts < min_train_count))
    return SplitBundle(
        train=bundle.train,
        validation=bundle.validation,
        test=bundle.test,
        seed=seed,
        cold_user_ids=cold_users,
        cold_item_ids=cold_items,
    )


def save_index_maps(interactions: InteractionSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"user_ids": interactions.user_ids, "item_ids": interactions.item_ids},
            fh,
            sort_keys=True,
        )
