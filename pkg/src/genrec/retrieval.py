"""Exact inner-product retrieval over the item corpus, and hit-rate / compliance metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import PAD, Catalog, LogTable, Splits, windows
from .errors import ConfigurationError, DataError
from .masking import causal_blocked
from .model import Model

HR_CUTOFFS = (10, 20, 50)


@dataclass(frozen=True)
class RetrievalIndex:
    ids: np.ndarray
    matrix: np.ndarray
    checkpoint_hash: str = ""

    def __post_init__(self):
        if len(self.ids) != len(self.matrix):
            raise ConfigurationError("index ids and rows disagree in length")
        for arr in (self.ids, self.matrix):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.ids)

    def scores(self, queries) -> np.ndarray:
        return np.asarray(queries, dtype=np.float64) @ self.matrix.T


def build_index(model: Model, catalog: Catalog, chunk=4096) -> RetrievalIndex:
    if len(catalog) == 0:
        raise DataError("cannot index an empty corpus")
    rows = [model.item_embeddings(catalog.ids[i:i + chunk]).data for i in range(0, len(catalog), chunk)]
    return RetrievalIndex(catalog.ids.copy(), np.ascontiguousarray(np.concatenate(rows)), model.fingerprint())


def _order(scores, ids):
    """Descending score, ties by ascending item id."""
    return np.lexsort((ids, -scores))


def top_k(index: RetrievalIndex, query, k: int) -> np.ndarray:
    if k > len(index):
        raise ConfigurationError(f"K={k} exceeds corpus size {len(index)}")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    s = index.scores(np.asarray(query).reshape(1, -1))[0]
    return index.ids[_order(s, index.ids)[:k]]


def top_k_many(index: RetrievalIndex, queries, k: int) -> np.ndarray:
    s = index.scores(queries)
    return np.stack([index.ids[_order(row, index.ids)[:k]] for row in s]) if len(s) else np.zeros((0, k), np.int64)


def ranks(index: RetrievalIndex, queries, targets) -> np.ndarray:
    """1-based rank of each target under its query, with the top_k tie-break."""
    s = index.scores(queries)
    pos = np.searchsorted(index.ids, targets)
    if np.any(index.ids[np.minimum(pos, len(index) - 1)] != targets):
        raise DataError("target item missing from the index")
    st = s[np.arange(len(s)), pos][:, None]
    ahead = (s > st) | ((s == st) & (index.ids[None, :] < np.asarray(targets)[:, None]))
    return ahead.sum(axis=1) + 1


def hit_rate(ranks_, k: int) -> float:
    ranks_ = np.asarray(ranks_)
    return float(np.mean(ranks_ <= k)) if len(ranks_) else 0.0


def cc_at_k(retrieved, c, catalog: Catalog, family="genre") -> float:
    """Share of retrieved ids whose ``family`` attribute equals ``c``."""
    retrieved = np.asarray(retrieved)
    if retrieved.size == 0:
        raise DataError("cc_at_k needs a nonempty retrieved list")
    return float(np.mean(catalog.category_of(retrieved, family) == c))


# -- query construction -------------------------------------------------------

def query_vectors(model: Model, logs: LogTable, users, cuts, conditions=None, family="genre",
                  chunk=512) -> np.ndarray:
    """Branch-1 query vectors for contexts events[:cut] (serving masks: causal, no temporal).

    With ``conditions`` the branch uses the condition-sparse mask and the
    condition embedding; without, it runs unconditioned at the last position.
    """
    out = []
    users, cuts = np.asarray(users), np.asarray(cuts)
    n = model.config.max_seq_len
    for i in range(0, len(users), chunk):
        u, c = users[i:i + chunk], cuts[i:i + chunk]
        items, _ = windows(logs, u, c, n)
        pad = items == PAD
        H = model.encode(items, causal_blocked(n)[None] | pad[:, None, :])
        if conditions is None:
            h = model.branch_forward(H, 1, pad)
        else:
            cond = np.asarray(conditions)[i:i + chunk]
            cats = model.catalog.category_of(items, family)
            h = model.branch_forward(H, 1, pad | (cats != cond[:, None]), condition=cond)
        out.append(h.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.d))


def eval_cuts(logs: LogTable, splits: Splits, horizon: int):
    """Per-user cut at the start of the evaluation region; users without ``horizon`` future events dropped."""
    users = np.arange(logs.num_users)
    keep = (splits.length - splits.sft_end >= horizon) & (splits.sft_end > 0)
    return users[keep], splits.sft_end[keep], int((~keep).sum())


def last_request_cuts(logs: LogTable):
    """Leave-last-out: cut at the start of each user's final request."""
    users, cuts = [], []
    for u in range(logs.num_users):
        s = logs.request_starts(u)
        if s[-1] > 0:
            users.append(u)
            cuts.append(s[-1])
    return np.array(users, dtype=np.int64), np.array(cuts, dtype=np.int64)


def hr_at_k(index, model, logs, users, cuts, ks=HR_CUTOFFS) -> dict:
    targets = logs.item[logs.offsets[users] + cuts]
    r = ranks(index, query_vectors(model, logs, users, cuts), targets)
    return {f"HR@{k}": hit_rate(r, k) for k in ks}


@dataclass
class HorizonCurve:
    offsets: list
    hr: list
    n: list
    skipped: int = 0

    def slope(self) -> float:
        """Least-squares slope of log HR against offset."""
        y = np.log(np.maximum(np.asarray(self.hr), 1e-12))
        x = np.asarray(self.offsets, dtype=np.float64)
        return float(np.polyfit(x, y, 1)[0])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["offset", "HR", "n"])
            for o, h, n in zip(self.offsets, self.hr, self.n):
                w.writerow([o, repr(h), n])


def horizon_eval(index, model, logs, splits, horizon=10, k=50) -> HorizonCurve:
    """HR@k of one query per user (at the evaluation cut) against the item at each later offset."""
    users, cuts, skipped = eval_cuts(logs, splits, horizon)
    if len(users) == 0:
        raise DataError("no users with enough future events for the horizon evaluation")
    q = query_vectors(model, logs, users, cuts)
    hr = []
    for o in range(1, horizon + 1):
        targets = logs.item[logs.offsets[users] + cuts + o - 1]
        hr.append(hit_rate(ranks(index, q, targets), k))
    return HorizonCurve(list(range(1, horizon + 1)), hr, [len(users)] * horizon, skipped)


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    horizon: HorizonCurve | None = None

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k in sorted(self.metrics):
                w.writerow([k, repr(self.metrics[k])])
            for k in sorted(self.counts):
                w.writerow([k, self.counts[k]])

    def summary_json(self) -> str:
        rec = {"metrics": self.metrics, "counts": self.counts}
        if self.horizon is not None:
            rec["horizon"] = {"hr": self.horizon.hr, "slope": self.horizon.slope()}
        return json.dumps(rec, sort_keys=True)


def general_eval(index, model, logs, ks=HR_CUTOFFS) -> EvalReport:
    users, cuts = last_request_cuts(logs)
    return EvalReport(hr_at_k(index, model, logs, users, cuts, ks), {"examples": len(users)})


def conditioned_eval(index, model, logs, splits, family="genre", ks=HR_CUTOFFS, conditioned=True) -> EvalReport:
    """HR@k and CC@k with the target's ``family`` value as the instruction.

    ``conditioned=False`` scores the same targets with the unconditioned
    branch, the baseline the instruction-following model is compared with.
    """
    users, cuts, skipped = eval_cuts(logs, splits, 1)
    targets = logs.item[logs.offsets[users] + cuts]
    conds = model.catalog.category_of(targets, family)
    q = query_vectors(model, logs, users, cuts, conds if conditioned else None, family)
    r = ranks(index, q, targets)
    metrics = {f"HR@{k}": hit_rate(r, k) for k in ks}
    top = top_k_many(index, q, max(ks))
    top_cats = model.catalog.category_of(top, family)
    for k in ks:
        metrics[f"CC@{k}"] = float(np.mean(top_cats[:, :k] == conds[:, None]))
    return EvalReport(metrics, {"examples": len(users), "skipped": skipped})
