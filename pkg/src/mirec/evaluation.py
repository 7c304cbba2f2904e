"""Leave-one-out ranking, sliced HR@K / NDCG@K, metric files, embedding
export and multi-regime comparison tables.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import PreparedDataset

log = logging.getLogger(__name__)

SLICES = ("overall", "head", "tail")
POLICIES = ("full_catalog", "sampled")
TARGETS = ("test", "validation")


class MetricMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CandidatePolicy:
    name: str = "full_catalog"
    n: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.name not in POLICIES:
            raise ValueError(f"candidate policy must be one of {POLICIES}")
        if self.n < 1:
            raise ValueError("sampled policy needs n >= 1")

    def describe(self) -> dict:
        if self.name == "full_catalog":
            return {"name": "full_catalog"}
        return {"name": "sampled", "n": self.n, "seed": self.seed}


@dataclass(frozen=True)
class RankingResult:
    user_id: int
    test_item: int
    rank: int
    k_cutoff: int


@dataclass(frozen=True)
class SliceMetrics:
    slice: str
    hr_at_k: float
    ndcg_at_k: float
    n_users: int

    def as_dict(self) -> dict:
        return {"hr": self.hr_at_k, "ndcg": self.ndcg_at_k, "n_users": self.n_users}


def rank_among(scores: np.ndarray, candidates: np.ndarray, test_item: int) -> int:
    """1-based rank of ``test_item``; equal scores are ordered by ascending item id."""
    candidates = np.asarray(candidates)
    hit = np.flatnonzero(candidates == test_item)
    assert hit.size == 1, f"test item {test_item} missing from candidate set"
    s = scores[hit[0]]
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (candidates < test_item)))


def sample_candidates(user: int, test_item: int, interacted, n_items: int, policy: CandidatePolicy) -> np.ndarray:
    """Candidate item ids for one user under ``policy`` (sorted, test item included)."""
    interacted = np.asarray(sorted(set(int(i) for i in interacted) | {test_item}), dtype=np.int64)
    if policy.name == "full_catalog":
        mask = np.ones(n_items, dtype=bool)
        mask[interacted] = False
        mask[test_item] = True
        return np.flatnonzero(mask)
    pool = np.setdiff1d(np.arange(n_items), interacted, assume_unique=True)
    rng = np.random.default_rng([policy.seed, user])
    picked = rng.choice(pool, size=min(policy.n, len(pool)), replace=False) if len(pool) else pool
    return np.sort(np.append(picked, test_item))


def _score_user(scorer, user: int, items: np.ndarray) -> np.ndarray:
    if callable(scorer) and not hasattr(scorer, "score_rows"):
        return np.asarray(scorer(user, items), dtype=np.float64)
    return scorer.score_rows(np.array([user]), items)[0]


def rank_for_user(
    scorer, user: int, test_item: int, excluded, n_items: int, policy: CandidatePolicy = CandidatePolicy(), k: int = 10
) -> RankingResult:
    """Rank one user's test item.

    ``excluded`` are the user's train + validation items (removed from the
    full-catalog candidates; the sampled policy also never draws them).
    ``scorer`` is a precomputed Scorer or a callable (user, items) -> scores.
    """
    cand = sample_candidates(user, test_item, excluded, n_items, policy)
    scores = _score_user(scorer, user, cand)
    return RankingResult(user, test_item, rank_among(scores, cand, test_item), k)


def _seen_matrix(ds: PreparedDataset, target: str = "test") -> sp.csr_matrix:
    # train rows plus the other held-out item: never a candidate for target
    tr = ds.split.train
    vu, vi = ds.split.pairs("validation" if target == "test" else "test")
    rows = np.concatenate([tr.user_ids, vu])
    cols = np.concatenate([tr.item_ids, vi])
    m = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(ds.n_users, ds.n_items))
    m.sum_duplicates()
    return m


def rank_test_users(
    scorer,
    ds: PreparedDataset,
    policy: CandidatePolicy = CandidatePolicy(),
    k: int = 10,
    chunk: int = 512,
    target: str = "test",
) -> list[RankingResult]:
    """Rank every user's held-out ``target`` item; scorer must be precomputed on ds.features.

    ``target="validation"`` ranks the validation items instead (test items
    are then excluded from candidates), which is what tuning should use.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    users, tests = ds.split.pairs(target)
    seen = _seen_matrix(ds, target)
    n_items = ds.n_items
    ids = np.arange(n_items)
    out = []
    if policy.name == "sampled":
        for u, t in zip(users, tests):
            excluded = seen[u].indices
            out.append(rank_for_user(scorer, int(u), int(t), excluded, n_items, policy, k))
        return out
    for s in range(0, len(users), chunk):
        uu, tt = users[s : s + chunk], tests[s : s + chunk]
        S = scorer.score_rows(uu)
        cand = ~seen[uu].toarray().astype(bool)
        cand[np.arange(len(uu)), tt] = True
        st = S[np.arange(len(uu)), tt][:, None]
        better = (S > st) & cand
        tied = (S == st) & cand & (ids[None, :] < tt[:, None])
        ranks = 1 + better.sum(axis=1) + tied.sum(axis=1)
        out.extend(RankingResult(int(u), int(t), int(r), k) for u, t, r in zip(uu, tt, ranks))
    return out


def hr_ndcg(results: list[RankingResult], k: int, head_items) -> dict:
    """HR@K and NDCG@K on overall / head / tail slices; empty slices map to None.

    Sums use math.fsum, so the result is exact-rounded and independent of
    result order.
    """
    head_items = set(int(i) for i in head_items)
    buckets = {s: [] for s in SLICES}
    for r in results:
        if r.k_cutoff != k:
            raise ValueError(f"result cut-off {r.k_cutoff} != {k}")
        hit = r.rank <= k
        gain = 1.0 / math.log2(r.rank + 1) if hit else 0.0
        buckets["overall"].append((float(hit), gain))
        buckets["head" if r.test_item in head_items else "tail"].append((float(hit), gain))
    out = {}
    for s, vals in buckets.items():
        if not vals:
            out[s] = None
            continue
        # fsum is correctly rounded, so slice means do not depend on user order
        n = len(vals)
        out[s] = SliceMetrics(s, math.fsum(h for h, _ in vals) / n, math.fsum(g for _, g in vals) / n, n)
    return out


def metric_record(
    slices: dict, dataset_hash: str, regime: str, k: int, policy: CandidatePolicy, target: str = "test"
) -> dict:
    return {
        "dataset_hash": dataset_hash,
        "regime": regime,
        "k": k,
        "candidate_policy": policy.describe(),
        "target": target,
        "slices": {s: (None if slices[s] is None else slices[s].as_dict()) for s in SLICES},
    }


def dumps_metrics(record: dict) -> str:
    return json.dumps(record, sort_keys=True, indent=2) + "\n"


def write_metric_file(path, record: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_metrics(record), encoding="utf-8")


def read_metric_file(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def evaluate(
    scorer,
    ds: PreparedDataset,
    regime: str,
    k: int = 10,
    policy: CandidatePolicy = CandidatePolicy(),
    target: str = "test",
) -> dict:
    scorer.precompute(ds.features)
    results = rank_test_users(scorer, ds, policy, k, target=target)
    return metric_record(hr_ndcg(results, k, ds.head_tail.head_items), ds.dataset_hash, regime, k, policy, target)


# ---------------------------------------------------------------- embeddings


def export_embeddings(scorer, ds: PreparedDataset, items=None) -> list[tuple]:
    """Rows (item_id, title, genres, vector) from the item side of ``scorer``.

    For a mixture the vector concatenates sqrt(weight)-scaled component
    embeddings, so inner products with the matching user vectors reproduce
    the mixed score.
    """
    if items is None:
        items = range(ds.n_items)
    keep = []
    for i in items:
        i = int(i)
        if 0 <= i < ds.n_items:
            keep.append(i)
        else:
            log.warning("export: unknown item %s skipped", i)
    keep = np.array(sorted(set(keep)), dtype=np.int64)
    if keep.size == 0:
        return []
    vecs = scorer.item_embeddings(ds.features, keep)
    return [(int(i), ds.item_meta[i]["title"], ds.item_meta[i]["genres"], vecs[n]) for n, i in enumerate(keep)]


def write_embeddings(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        dim = len(rows[0][3]) if rows else 0
        w.writerow(["item_id", "title", "genres"] + [f"e{d}" for d in range(dim)])
        for item, title, genres, vec in rows:
            w.writerow([item, title, genres] + [repr(float(x)) for x in vec])


def read_embeddings(path) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh, delimiter="\t")
        next(r)
        return {
            int(row[0]): {"title": row[1], "genres": row[2], "vector": np.array([float(x) for x in row[3:]])}
            for row in r
        }


# ---------------------------------------------------------------- reports

COLUMNS = [(s, m) for s in SLICES for m in ("hr", "ndcg")]


def compare_report(records: list[dict]) -> tuple[str, list[dict]]:
    """Percent-scaled Overall/Head/Tail x HR/NDCG table; column maxima starred.

    Returns (plain-text table, machine-readable rows). Refuses records from
    different datasets or cut-offs.
    """
    if not records:
        raise ValueError("no metric records to compare")
    hashes = {r["dataset_hash"] for r in records}
    if len(hashes) > 1:
        raise MetricMismatch(f"metric files come from different datasets: {sorted(hashes)}")
    ks = {r["k"] for r in records}
    if len(ks) > 1:
        raise MetricMismatch(f"metric files use different cut-offs K: {sorted(ks)}")
    targets = {r.get("target", "test") for r in records}
    if len(targets) > 1:
        raise MetricMismatch(f"metric files rank different held-out targets: {sorted(targets)}")
    k = ks.pop()
    rows = []
    for r in records:
        row = {"regime": r["regime"]}
        for s, m in COLUMNS:
            sl = r["slices"].get(s)
            row[f"{s}_{m}"] = None if sl is None else sl[m]
        rows.append(row)
    best = {}
    if len(rows) > 1:
        for s, m in COLUMNS:
            vals = [row[f"{s}_{m}"] for row in rows if row[f"{s}_{m}"] is not None]
            if vals:
                best[f"{s}_{m}"] = max(vals)
    header = ["Measure%"] + [f"{s.capitalize()} {m.upper()}@{k}" for s, m in COLUMNS]
    lines = []
    for row in rows:
        cells = [row["regime"]]
        for s, m in COLUMNS:
            v = row[f"{s}_{m}"]
            if v is None:
                cells.append("-")
            else:
                mark = "*" if f"{s}_{m}" in best and v == best[f"{s}_{m}"] else ""
                cells.append(f"{100 * v:.2f}{mark}")
        lines.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *lines)]
    buf = io.StringIO()
    fmt = "  ".join(f"{{:<{w}}}" if n == 0 else f"{{:>{w}}}" for n, w in enumerate(widths))
    buf.write(fmt.format(*header) + "\n")
    buf.write("  ".join("-" * w for w in widths) + "\n")
    for cells in lines:
        buf.write(fmt.format(*cells) + "\n")
    for row in rows:
        row["best"] = sorted(c for c in best if row[c] == best[c])
    return buf.getvalue(), rows
