"""Dataset ingest, feature encoding, leave-one-out splitting and the
long-tail curriculum training sets.

Entities are re-indexed to contiguous integers in ascending order of their
raw key, so "ascending item_id" tie-breaking is the same before and after
indexing.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import re
import shutil
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

FORMATS = ("movielens1m", "bookcrossing")

ONEHOT = "categorical-onehot"
MULTIHOT = "multi-hot"
CONTINUOUS = "continuous"
BOW = "bag-of-words"


class IngestError(Exception):
    """Fatal problem reading a raw dataset file."""


class EmptyTrainingSplit(ValueError):
    pass


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    reward: int
    timestamp: int | None = None


@dataclass
class Interactions:
    """Columnar list of (user, item, reward[, timestamp]) triplets."""

    user_ids: np.ndarray
    item_ids: np.ndarray
    rewards: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.int64)
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = len(self.user_ids)
        if len(self.item_ids) != n or len(self.rewards) != n:
            raise ValueError("interaction columns have different lengths")
        if self.timestamps is not None and len(self.timestamps) != n:
            raise ValueError("timestamp column length mismatch")
        if n and not np.isin(self.rewards, (0, 1)).all():
            raise ValueError("rewards must be binary")

    @classmethod
    def from_rows(cls, rows) -> Interactions:
        rows = [Interaction(*r) for r in rows]
        has_ts = bool(rows) and all(r.timestamp is not None for r in rows)
        return cls(
            [r.user_id for r in rows],
            [r.item_id for r in rows],
            [r.reward for r in rows],
            [r.timestamp for r in rows] if has_ts else None,
        )

    @classmethod
    def empty(cls) -> Interactions:
        return cls([], [], [])

    def __len__(self) -> int:
        return len(self.user_ids)

    def __iter__(self) -> Iterator[Interaction]:
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k) -> Interaction:
        ts = None if self.timestamps is None else int(self.timestamps[k])
        return Interaction(int(self.user_ids[k]), int(self.item_ids[k]), int(self.rewards[k]), ts)

    def take(self, idx) -> Interactions:
        idx = np.asarray(idx, dtype=np.int64)
        return Interactions(
            self.user_ids[idx],
            self.item_ids[idx],
            self.rewards[idx],
            None if self.timestamps is None else self.timestamps[idx],
        )

    def rows(self) -> list[tuple]:
        return [tuple(r) for r in self]


# ---------------------------------------------------------------- ingest


@dataclass
class RawDataset:
    format: str
    ratings: list  # (user_key, item_key, timestamp or None), reward 1 each
    users: dict  # user_key -> attribute dict
    items: dict  # item_key -> attribute dict
    drops: dict = field(default_factory=dict)

    @property
    def has_timestamps(self) -> bool:
        return self.format == "movielens1m"


ML_FILES = ("ratings.dat", "users.dat", "movies.dat")
BX_FILES = ("BX-Book-Ratings.csv", "BX-Users.csv", "BX-Books.csv")
_YEAR_RE = re.compile(r"^(.*?)\s*\((\d{4})\)\s*$")


def _read_lines(path: Path) -> list[str]:
    try:
        with open(path, encoding="latin-1", newline="") as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _int_or_none(s: str):
    try:
        return int(s.strip())
    except (ValueError, AttributeError):
        return None


def split_title_year(title: str) -> tuple[str, int | None]:
    m = _YEAR_RE.match(title)
    if not m:
        return title.strip(), None
    return m.group(1).strip(), int(m.group(2))


def _parse_movielens(root: Path) -> RawDataset:
    paths = {name: root / name for name in ML_FILES}
    for p in paths.values():
        if not p.is_file():
            raise IngestError(f"missing dataset file {p}")
    drops = Counter()

    users = {}
    for line in _read_lines(paths["users.dat"]):
        if not line.strip():
            continue
        parts = line.split("::")
        uid = _int_or_none(parts[0]) if parts else None
        if len(parts) != 5 or uid is None:
            drops["malformed_user_rows"] += 1
            continue
        gender, age, occ, zipcode = (p.strip() for p in parts[1:])
        age = _int_or_none(age)
        if not gender or age is None or not occ or not zipcode:
            drops["invalid_users"] += 1
            continue
        users[uid] = {"gender": gender, "age": age, "occupation": occ, "zipcode": zipcode}

    items = {}
    for line in _read_lines(paths["movies.dat"]):
        if not line.strip():
            continue
        parts = line.split("::")
        iid = _int_or_none(parts[0]) if parts else None
        if len(parts) != 3 or iid is None:
            drops["malformed_item_rows"] += 1
            continue
        title, year = split_title_year(parts[1])
        genres = [g for g in parts[2].strip().split("|") if g]
        if not title or year is None or not genres:
            drops["invalid_items"] += 1
            continue
        items[iid] = {"title": title, "year": year, "genres": genres}

    ratings = []
    for line in _read_lines(paths["ratings.dat"]):
        if not line.strip():
            continue
        parts = line.split("::")
        vals = [_int_or_none(p) for p in parts]
        if len(parts) != 4 or any(v is None for v in vals):
            drops["malformed_rating_rows"] += 1
            continue
        uid, iid, _rating, ts = vals
        if uid not in users or iid not in items:
            drops["ratings_with_invalid_features"] += 1
            continue
        ratings.append((uid, iid, ts))
    return RawDataset("movielens1m", ratings, users, items, dict(drops))


def _read_bx_csv(path: Path, n_fields: int, drops: Counter, tally: str) -> list[list[str]]:
    lines = _read_lines(path)
    out = []
    reader = csv.reader(lines[1:], delimiter=";", quotechar='"', escapechar="\\", doublequote=True)
    while True:
        try:
            row = next(reader)
        except StopIteration:
            break
        except csv.Error:
            drops[tally] += 1
            continue
        if not row:
            continue
        if len(row) < n_fields:
            drops[tally] += 1
            continue
        out.append(row)
    return out


def _parse_bookcrossing(root: Path, include_zero_ratings: bool) -> RawDataset:
    paths = {name: root / name for name in BX_FILES}
    for p in paths.values():
        if not p.is_file():
            raise IngestError(f"missing dataset file {p}")
    drops = Counter()

    users = {}
    for row in _read_bx_csv(paths["BX-Users.csv"], 3, drops, "malformed_user_rows"):
        uid, location, age = _int_or_none(row[0]), row[1].strip(), _int_or_none(row[2])
        if uid is None or not location or age is None or not 0 < age <= 120:
            drops["invalid_users"] += 1
            continue
        users[uid] = {"location": location, "age": age}

    items = {}
    for row in _read_bx_csv(paths["BX-Books.csv"], 5, drops, "malformed_item_rows"):
        isbn, title, author, year, publisher = (c.strip() for c in row[:5])
        year = _int_or_none(year)
        if not isbn or not title or not author or not publisher or year is None or year <= 0:
            drops["invalid_items"] += 1
            continue
        items[isbn] = {"title": title, "author": author, "year": year, "publisher": publisher}

    ratings = []
    for row in _read_bx_csv(paths["BX-Book-Ratings.csv"], 3, drops, "malformed_rating_rows"):
        uid, isbn, rating = _int_or_none(row[0]), row[1].strip(), _int_or_none(row[2])
        if uid is None or not isbn or rating is None:
            drops["malformed_rating_rows"] += 1
            continue
        if rating == 0 and not include_zero_ratings:
            drops["zero_ratings_excluded"] += 1
            continue
        if uid not in users or isbn not in items:
            drops["ratings_with_invalid_features"] += 1
            continue
        ratings.append((uid, isbn, None))
    return RawDataset("bookcrossing", ratings, users, items, dict(drops))


def parse_dataset(path, fmt: str, include_zero_ratings: bool = True) -> RawDataset:
    """Read a raw MovieLens-1M or Bookcrossing directory.

    Every rated pair becomes a positive. Rows whose user or item has a
    missing/invalid required attribute are dropped and tallied in
    ``RawDataset.drops``.
    """
    root = Path(path)
    if fmt == "movielens1m":
        raw = _parse_movielens(root)
    elif fmt == "bookcrossing":
        raw = _parse_bookcrossing(root, include_zero_ratings)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    if raw.drops:
        log.warning("ingest drops for %s: %s", root, raw.drops)
    return raw


# ---------------------------------------------------------------- indexing


@dataclass
class Catalog:
    user_keys: list
    item_keys: list

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.item_keys)


def users_with_min_interactions(user_keys, minimum: int = 3) -> set:
    counts = Counter(user_keys)
    return {u for u, c in counts.items() if c >= minimum}


def index_ratings(raw: RawDataset, min_user_interactions: int = 3) -> tuple[Interactions, Catalog, int]:
    """Deduplicate pairs, drop sparse users and map keys to contiguous ids.

    Returns (interactions, catalog, dropped_user_count).
    """
    latest = {}
    for u, i, ts in raw.ratings:
        prev = latest.get((u, i), "absent")
        if prev == "absent" or (ts is not None and prev is not None and ts > prev):
            latest[(u, i)] = ts
    keep_users = users_with_min_interactions([u for u, _ in latest], min_user_interactions)
    dropped = len({u for u, _ in latest}) - len(keep_users)
    pairs = sorted((k for k in latest if k[0] in keep_users), key=lambda k: (k[0], k[1]))
    user_keys = sorted(keep_users)
    item_keys = sorted({i for _, i in pairs})
    uidx = {k: n for n, k in enumerate(user_keys)}
    iidx = {k: n for n, k in enumerate(item_keys)}
    ts = [latest[p] for p in pairs] if raw.has_timestamps else None
    inter = Interactions(
        [uidx[u] for u, _ in pairs], [iidx[i] for _, i in pairs], np.ones(len(pairs), dtype=np.int64), ts
    )
    return inter, Catalog(user_keys, item_keys), dropped


# ---------------------------------------------------------------- features


@dataclass(frozen=True)
class FieldLayout:
    name: str
    kind: str
    offset: int
    width: int


@dataclass
class EncodedFeatures:
    """Sparse-stored dense feature vectors plus their segment layout."""

    user_matrix: sp.csr_matrix
    item_matrix: sp.csr_matrix
    user_layout: list[FieldLayout]
    item_layout: list[FieldLayout]
    vocabularies: dict = field(default_factory=dict)

    def user_vector(self, u: int) -> np.ndarray:
        return _dense_row(self.user_matrix, u)

    def item_vector(self, i: int) -> np.ndarray:
        return _dense_row(self.item_matrix, i)


def _dense_row(mat, r: int) -> np.ndarray:
    row = mat[r]
    return row.toarray().ravel() if sp.issparse(row) else np.asarray(row, dtype=np.float64).ravel()


FIELD_SPECS = {
    "movielens1m": {
        "user": [("user_id", ONEHOT), ("gender", ONEHOT), ("occupation", ONEHOT), ("zipcode", ONEHOT), ("age", CONTINUOUS)],
        "item": [("item_id", ONEHOT), ("genres", MULTIHOT), ("year", CONTINUOUS), ("title", BOW)],
    },
    "bookcrossing": {
        "user": [("user_id", ONEHOT), ("location", ONEHOT), ("age", CONTINUOUS)],
        "item": [("item_id", ONEHOT), ("author", ONEHOT), ("publisher", ONEHOT), ("year", CONTINUOUS), ("title", BOW)],
    },
}

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def build_title_vocab(titles, size: int) -> list[str]:
    if size < 1:
        raise ValueError("title_vocab_size must be >= 1")
    counts = Counter(tok for t in titles for tok in tokenize(t))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [tok for tok, _ in ranked[:size]]


def zscore_stats(values) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return 0.0, 1.0
    std = float(arr.std())
    return float(arr.mean()), std if std > 0 else 1.0


def _encode_side(keys, attrs, specs, title_vocab, stats_keys):
    vocabs, layout = {}, []
    offset = 0
    for name, kind in specs:
        if kind in (ONEHOT, MULTIHOT):
            if name.endswith("_id"):
                values = sorted(map(str, keys))
            elif kind == MULTIHOT:
                values = sorted({str(v) for k in keys for v in attrs[k][name]})
            else:
                values = sorted({str(attrs[k][name]) for k in keys})
            vocabs[name] = values
            width = len(values) + 1  # trailing out-of-vocabulary slot
        elif kind == CONTINUOUS:
            vocabs[name] = zscore_stats(attrs[k][name] for k in stats_keys)
            width = 1
        else:
            vocabs[name] = list(title_vocab)
            width = len(title_vocab)
        layout.append(FieldLayout(name, kind, offset, width))
        offset += width

    lookup = {
        f.name: {v: n for n, v in enumerate(vocabs[f.name])} for f in layout if f.kind in (ONEHOT, MULTIHOT, BOW)
    }
    rows, cols, vals = [], [], []
    for r, key in enumerate(keys):
        a = attrs[key]
        for f in layout:
            if f.kind == ONEHOT:
                raw = str(key) if f.name.endswith("_id") else str(a[f.name])
                rows.append(r)
                cols.append(f.offset + lookup[f.name].get(raw, f.width - 1))
                vals.append(1.0)
            elif f.kind == MULTIHOT:
                hot = sorted({lookup[f.name].get(str(v), f.width - 1) for v in a[f.name]})
                for c in hot:
                    rows.append(r)
                    cols.append(f.offset + c)
                    vals.append(1.0)
            elif f.kind == CONTINUOUS:
                mean, std = vocabs[f.name]
                z = (float(a[f.name]) - mean) / std
                if z != 0.0:
                    rows.append(r)
                    cols.append(f.offset)
                    vals.append(z)
            else:
                counts = Counter(lookup[f.name][t] for t in tokenize(a["title"]) if t in lookup[f.name])
                for c in sorted(counts):
                    rows.append(r)
                    cols.append(f.offset + c)
                    vals.append(float(counts[c]))
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(len(keys), offset), dtype=np.float64)
    mat.sort_indices()
    return mat, layout, vocabs


def encode_features(
    raw: RawDataset,
    title_vocab_size: int = 5000,
    catalog: Catalog | None = None,
    stats_users=None,
    stats_items=None,
) -> EncodedFeatures:
    """One-hot / multi-hot / z-score / bag-of-words encoding of both sides.

    ``stats_users`` / ``stats_items`` (raw keys) restrict the z-score
    statistics to the training population; default is every catalog entry.
    """
    if title_vocab_size < 1:
        raise ValueError("title_vocab_size must be >= 1")
    if catalog is None:
        catalog = Catalog(sorted(raw.users), sorted(raw.items))
    specs = FIELD_SPECS[raw.format]
    title_vocab = build_title_vocab((raw.items[k]["title"] for k in catalog.item_keys), title_vocab_size)
    umat, ulayout, uvocab = _encode_side(
        catalog.user_keys, raw.users, specs["user"], title_vocab,
        catalog.user_keys if stats_users is None else stats_users,
    )
    imat, ilayout, ivocab = _encode_side(
        catalog.item_keys, raw.items, specs["item"], title_vocab,
        catalog.item_keys if stats_items is None else stats_items,
    )
    return EncodedFeatures(umat, imat, ulayout, ilayout, {"user": uvocab, "item": ivocab})


# ---------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    train: Interactions
    validation: dict  # user -> held-out item
    test: dict
    dropped_users: int = 0

    def pairs(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        table = self.validation if which == "validation" else self.test
        users = np.array(sorted(table), dtype=np.int64)
        return users, np.array([table[u] for u in users], dtype=np.int64)


def leave_one_out_split(interactions: Interactions, has_timestamps: bool, seed: int = 0) -> DatasetSplit:
    """Per user: latest item to test, second latest to validation.

    Without timestamps the two held-out items are distinct uniform picks
    drawn from a generator seeded once and walked in ascending user order.
    Users with fewer than three interactions are dropped and counted.
    """
    if has_timestamps and interactions.timestamps is None:
        raise ValueError("has_timestamps set but interactions carry no timestamps")
    n = len(interactions)
    if n == 0:
        return DatasetSplit(Interactions.empty(), {}, {}, 0)
    users, items = interactions.user_ids, interactions.item_ids
    if has_timestamps:
        order = np.lexsort((items, interactions.timestamps, users))
    else:
        order = np.lexsort((items, users))
    rng = np.random.default_rng(seed)
    sorted_users = users[order]
    bounds = np.flatnonzero(np.diff(sorted_users)) + 1
    groups = np.split(order, bounds)
    keep, val, test, dropped = [], {}, {}, 0
    for g in groups:
        u = int(users[g[0]])
        if len(g) < 3:
            dropped += 1
            continue
        if has_timestamps:
            t_pos, v_pos = len(g) - 1, len(g) - 2
        else:
            t_pos, v_pos = (int(x) for x in rng.choice(len(g), size=2, replace=False))
        test[u] = int(items[g[t_pos]])
        val[u] = int(items[g[v_pos]])
        keep.extend(int(x) for k, x in enumerate(g) if k not in (t_pos, v_pos))
    keep.sort()
    return DatasetSplit(interactions.take(keep), val, test, dropped)


# ---------------------------------------------------------------- popularity / head-tail


@dataclass
class PopularityTable:
    counts: dict  # item -> positive count in train

    def __post_init__(self):
        self.total = int(sum(self.counts.values()))
        self.probabilities = {i: c / self.total for i, c in self.counts.items()} if self.total else {}

    def as_array(self, n_items: int) -> np.ndarray:
        """Probabilities indexed by item id; zero for items absent from training."""
        p = np.zeros(n_items, dtype=np.float64)
        for i, c in self.counts.items():
            p[i] = c / self.total
        return p

    def count_array(self, n_items: int) -> np.ndarray:
        c = np.zeros(n_items, dtype=np.int64)
        for i, n in self.counts.items():
            c[i] = n
        return c


def compute_popularity(train: Interactions) -> PopularityTable:
    if len(train) == 0:
        raise EmptyTrainingSplit("empty training split")
    pos = train.item_ids[train.rewards == 1]
    items, counts = np.unique(pos, return_counts=True)
    return PopularityTable({int(i): int(c) for i, c in zip(items, counts)})


@dataclass
class HeadTailSplit:
    head_fraction: float
    k_threshold: int
    head_items: frozenset
    tail_items: frozenset

    def head_mask(self, n_items: int) -> np.ndarray:
        mask = np.zeros(n_items, dtype=bool)
        mask[list(self.head_items)] = True
        return mask


def split_head_tail(pop: PopularityTable, head_fraction: float, catalog=None) -> HeadTailSplit:
    """Most frequent ceil(fraction * |catalog|) items form the head.

    Ties in count are broken by ascending item id; ``k_threshold`` is the
    count of the least frequent head item. ``catalog`` defaults to the items
    seen in training; items outside training have count zero.
    """
    if not 0.0 < head_fraction < 1.0:
        raise ValueError("head_fraction must lie strictly between 0 and 1")
    items = sorted(pop.counts) if catalog is None else sorted(int(i) for i in catalog)
    if not items:
        raise EmptyTrainingSplit("empty training split")
    ranked = sorted(items, key=lambda i: (-pop.counts.get(i, 0), i))
    n_head = math.ceil(head_fraction * len(ranked) - 1e-12)
    n_head = min(max(n_head, 1), len(ranked))
    head = ranked[:n_head]
    k = pop.counts.get(head[-1], 0)
    if k < 1:
        raise ValueError("head items must have at least one training interaction")
    return HeadTailSplit(head_fraction, int(k), frozenset(head), frozenset(ranked[n_head:]))


# ---------------------------------------------------------------- curriculum sets


@dataclass
class CurriculumDatasets:
    omega_star: Interactions
    omega_k: Interactions
    k: int
    sampling_seed: int


def build_curriculum_sets(
    train: Interactions, split: HeadTailSplit, seed: int = 0, head_only: bool = False
) -> CurriculumDatasets:
    """Many-shot set = all of train; few-shot set caps every head item at k rows.

    Head items keep a seeded uniform subsample of exactly k rows, tail items
    keep every row. ``head_only`` drops tail rows from both sets (the
    head-items-only meta-learning ablation).
    """
    k = split.k_threshold
    order = np.argsort(train.item_ids, kind="stable")
    items_sorted = train.item_ids[order]
    bounds = np.flatnonzero(np.diff(items_sorted)) + 1
    rng = np.random.default_rng(seed)
    star_rows, few_rows = [], []
    for g in np.split(order, bounds) if len(order) else []:
        item = int(train.item_ids[g[0]])
        if item in split.head_items:
            assert len(g) >= k, f"head item {item} has {len(g)} < k={k} interactions"
            star_rows.append(g)
            few_rows.append(np.sort(rng.choice(g, size=k, replace=False)))
        elif not head_only:
            star_rows.append(g)
            few_rows.append(g)
    star = np.sort(np.concatenate(star_rows)) if star_rows else np.array([], dtype=np.int64)
    few = np.sort(np.concatenate(few_rows)) if few_rows else np.array([], dtype=np.int64)
    omega_star = train if not head_only else train.take(star)
    return CurriculumDatasets(omega_star, train.take(few), k, seed)


def expected_few_shot_size(pop: PopularityTable, split: HeadTailSplit) -> int:
    return split.k_threshold * len(split.head_items) + sum(pop.counts.get(i, 0) for i in split.tail_items)


def popularity_cdf(pop: PopularityTable, n_items: int, fractions=None) -> list[tuple[float, float]]:
    """(top item fraction, share of interactions) pairs; the long-tail CDF."""
    if fractions is None:
        fractions = (0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0)
    counts = np.sort(pop.count_array(n_items))[::-1]
    cum = np.cumsum(counts) / max(counts.sum(), 1)
    out = []
    for f in fractions:
        n = max(1, math.ceil(f * n_items - 1e-12))
        out.append((float(f), float(cum[n - 1])))
    return out


# ---------------------------------------------------------------- prepared dataset


@dataclass
class PreparedDataset:
    format: str
    catalog: Catalog
    features: EncodedFeatures
    split: DatasetSplit
    popularity: PopularityTable
    head_tail: HeadTailSplit
    curriculum: CurriculumDatasets
    item_meta: list  # per item index: {"title": ..., "genres": ...}
    summary: dict
    dataset_hash: str = ""

    @property
    def n_users(self) -> int:
        return self.catalog.n_users

    @property
    def n_items(self) -> int:
        return self.catalog.n_items


def _item_meta(raw: RawDataset, key) -> dict:
    a = raw.items[key]
    if raw.format == "movielens1m":
        return {"title": a["title"], "genres": "|".join(a["genres"])}
    return {"title": a["title"], "genres": a["author"]}


def prepare_dataset(
    raw: RawDataset,
    head_fraction: float,
    title_vocab_size: int = 5000,
    split_seed: int = 0,
    curriculum_seed: int = 0,
) -> PreparedDataset:
    inter, catalog, dropped = index_ratings(raw)
    split = leave_one_out_split(inter, raw.has_timestamps, split_seed)
    split.dropped_users += dropped
    train_users = sorted({catalog.user_keys[u] for u in np.unique(split.train.user_ids)})
    train_items = sorted({catalog.item_keys[i] for i in np.unique(split.train.item_ids)}, key=str)
    features = encode_features(raw, title_vocab_size, catalog, train_users, train_items)
    pop = compute_popularity(split.train)
    ht = split_head_tail(pop, head_fraction, range(catalog.n_items))
    cur = build_curriculum_sets(split.train, ht, curriculum_seed)
    assert len(cur.omega_k) == expected_few_shot_size(pop, ht)
    summary = {
        "n_users": catalog.n_users,
        "n_items": catalog.n_items,
        "n_interactions": len(inter),
        "n_train": len(split.train),
        "n_omega_k": len(cur.omega_k),
        "k_threshold": ht.k_threshold,
        "n_head_items": len(ht.head_items),
        "n_tail_items": len(ht.tail_items),
        "dropped_users": split.dropped_users,
        "ingest_drops": dict(sorted(raw.drops.items())),
    }
    meta = [_item_meta(raw, k) for k in catalog.item_keys]
    return PreparedDataset(raw.format, catalog, features, split, pop, ht, cur, meta, summary)


# Processed-dataset directory (all UTF-8 text):
#   users.tsv / items.tsv     index, raw key (items also title, genres)
#   layout.json               per-side field layout + vocabularies
#   user_features.txt         "<index>\t<col>:<value> ..." sparse rows
#   item_features.txt
#   train.tsv / omega_k.tsv   user, item, reward, timestamp ("" if absent)
#   validation.tsv, test.tsv  user, item
#   popularity.tsv            item, count, probability
#   head_tail.json            fraction, k, sorted head item list
#   cdf.tsv                   top item fraction, interaction share
#   manifest.json             summary, settings, dataset_hash (sha256 of the other files)


def _write_sparse(path: Path, mat: sp.csr_matrix):
    with open(path, "w", encoding="utf-8") as fh:
        for r in range(mat.shape[0]):
            lo, hi = mat.indptr[r], mat.indptr[r + 1]
            cells = " ".join(f"{c}:{v!r}" for c, v in zip(mat.indices[lo:hi], mat.data[lo:hi].tolist()))
            fh.write(f"{r}\t{cells}\n")


def _read_sparse(path: Path, n_cols: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    n_rows = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            r, _, cells = line.rstrip("\n").partition("\t")
            r = int(r)
            n_rows = max(n_rows, r + 1)
            for cell in cells.split():
                c, v = cell.split(":")
                rows.append(r)
                cols.append(int(c))
                vals.append(float(v))
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_cols), dtype=np.float64)
    mat.sort_indices()
    return mat


def _write_interactions(path: Path, inter: Interactions):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user\titem\treward\ttimestamp\n")
        for r in inter:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.reward}\t{'' if r.timestamp is None else r.timestamp}\n")


def _read_interactions(path: Path) -> Interactions:
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            u, i, r, t = line.rstrip("\n").split("\t")
            rows.append((int(u), int(i), int(r), int(t) if t else None))
    return Interactions.from_rows(rows) if rows else Interactions.empty()


def _write_pairs(path: Path, table: dict):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user\titem\n")
        for u in sorted(table):
            fh.write(f"{u}\t{table[u]}\n")


def _read_pairs(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        next(fh)
        return {int(u): int(i) for u, i in (line.rstrip("\n").split("\t") for line in fh)}


def _layout_json(layout):
    return [{"name": f.name, "kind": f.kind, "offset": f.offset, "width": f.width} for f in layout]


def hash_directory(root: Path, exclude=("manifest.json",)) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).iterdir()):
        if p.name in exclude or not p.is_file():
            continue
        h.update(p.name.encode() + b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def _clean(s) -> str:
    return str(s).replace("\t", " ").replace("\n", " ")


def write_prepared(ds: PreparedDataset, out_dir, settings: dict | None = None) -> str:
    """Write atomically (temp dir + rename); returns the dataset hash."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".prepare-", dir=out_dir.parent))
    try:
        with open(tmp / "users.tsv", "w", encoding="utf-8") as fh:
            fh.write("index\tkey\n")
            for n, k in enumerate(ds.catalog.user_keys):
                fh.write(f"{n}\t{_clean(k)}\n")
        with open(tmp / "items.tsv", "w", encoding="utf-8") as fh:
            fh.write("index\tkey\ttitle\tgenres\n")
            for n, k in enumerate(ds.catalog.item_keys):
                m = ds.item_meta[n]
                fh.write(f"{n}\t{_clean(k)}\t{_clean(m['title'])}\t{_clean(m['genres'])}\n")
        layout = {
            "format": ds.format,
            "user": _layout_json(ds.features.user_layout),
            "item": _layout_json(ds.features.item_layout),
            "vocabularies": ds.features.vocabularies,
        }
        (tmp / "layout.json").write_text(json.dumps(layout, sort_keys=True, indent=1), encoding="utf-8")
        _write_sparse(tmp / "user_features.txt", ds.features.user_matrix)
        _write_sparse(tmp / "item_features.txt", ds.features.item_matrix)
        _write_interactions(tmp / "train.tsv", ds.split.train)
        _write_interactions(tmp / "omega_k.tsv", ds.curriculum.omega_k)
        _write_pairs(tmp / "validation.tsv", ds.split.validation)
        _write_pairs(tmp / "test.tsv", ds.split.test)
        with open(tmp / "popularity.tsv", "w", encoding="utf-8") as fh:
            fh.write("item\tcount\tprobability\n")
            for i in sorted(ds.popularity.counts):
                fh.write(f"{i}\t{ds.popularity.counts[i]}\t{ds.popularity.probabilities[i]!r}\n")
        ht = {
            "head_fraction": ds.head_tail.head_fraction,
            "k_threshold": ds.head_tail.k_threshold,
            "head_items": sorted(ds.head_tail.head_items),
            "curriculum_seed": ds.curriculum.sampling_seed,
        }
        (tmp / "head_tail.json").write_text(json.dumps(ht), encoding="utf-8")
        with open(tmp / "cdf.tsv", "w", encoding="utf-8") as fh:
            fh.write("top_item_fraction\tinteraction_share\n")
            for f, s in popularity_cdf(ds.popularity, ds.n_items):
                fh.write(f"{f!r}\t{s!r}\n")
        digest = hash_directory(tmp)
        manifest = {"dataset_hash": digest, "format": ds.format, "summary": ds.summary, "settings": settings or {}}
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    ds.dataset_hash = digest
    return digest


def _layout_from_json(entries) -> list[FieldLayout]:
    return [FieldLayout(e["name"], e["kind"], e["offset"], e["width"]) for e in entries]


def load_prepared(path) -> PreparedDataset:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise IngestError(f"{root} is not a processed dataset directory (no manifest.json)")
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    layout = json.loads((root / "layout.json").read_text(encoding="utf-8"))
    ulayout = _layout_from_json(layout["user"])
    ilayout = _layout_from_json(layout["item"])

    def width(lay):
        return lay[-1].offset + lay[-1].width if lay else 0

    with open(root / "users.tsv", encoding="utf-8") as fh:
        next(fh)
        user_keys = [line.rstrip("\n").split("\t")[1] for line in fh]
    item_keys, meta = [], []
    with open(root / "items.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            _, key, title, genres = line.rstrip("\n").split("\t")
            item_keys.append(key)
            meta.append({"title": title, "genres": genres})
    umat = _read_sparse(root / "user_features.txt", width(ulayout))
    imat = _read_sparse(root / "item_features.txt", width(ilayout))
    features = EncodedFeatures(umat, imat, ulayout, ilayout, layout["vocabularies"])
    train = _read_interactions(root / "train.tsv")
    split = DatasetSplit(
        train, _read_pairs(root / "validation.tsv"), _read_pairs(root / "test.tsv"),
        manifest["summary"].get("dropped_users", 0),
    )
    counts = {}
    with open(root / "popularity.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            i, c, _ = line.split("\t")
            counts[int(i)] = int(c)
    pop = PopularityTable(counts)
    ht_raw = json.loads((root / "head_tail.json").read_text(encoding="utf-8"))
    head = frozenset(ht_raw["head_items"])
    ht = HeadTailSplit(
        ht_raw["head_fraction"], ht_raw["k_threshold"], head, frozenset(range(len(item_keys))) - head
    )
    cur = CurriculumDatasets(train, _read_interactions(root / "omega_k.tsv"), ht.k_threshold, ht_raw["curriculum_seed"])
    return PreparedDataset(
        layout["format"], Catalog(user_keys, item_keys), features, split, pop, ht, cur, meta,
        manifest["summary"], manifest["dataset_hash"],
    )
