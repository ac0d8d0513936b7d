"""Columnar item catalog and interaction-log tables, JSONL I/O and data splits."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError

PAD = -1
EVENT_KEYS = ("user_id", "item_id", "ts", "request_id", "idx")
ITEM_KEYS = ("item_id", "genre", "language", "release")


@dataclass
class Catalog:
    ids: np.ndarray
    genre: np.ndarray
    language: np.ndarray
    release: np.ndarray  # 0 classic, 1 new

    def __post_init__(self):
        order = np.argsort(self.ids, kind="stable")
        for name in ("ids", "genre", "language", "release"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64)[order])
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("item ids must be unique")

    def __len__(self):
        return len(self.ids)

    def rows(self, item_ids) -> np.ndarray:
        item_ids = np.asarray(item_ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, item_ids)
        pos = np.clip(pos, 0, max(len(self.ids) - 1, 0))
        if len(self.ids) == 0 or np.any(self.ids[pos] != item_ids):
            missing = np.setdiff1d(item_ids, self.ids)
            raise DataError(f"unknown item ids: {missing[:5].tolist()}")
        return pos

    def attribute(self, family: str) -> np.ndarray:
        if family not in ("genre", "language", "release"):
            raise DataError(f"unknown condition family {family!r}")
        return getattr(self, family)

    def category_of(self, item_ids, family: str) -> np.ndarray:
        """Attribute values for ``item_ids``; PAD ids map to PAD."""
        item_ids = np.asarray(item_ids, dtype=np.int64)
        out = np.full(item_ids.shape, PAD, dtype=np.int64)
        real = item_ids != PAD
        out[real] = self.attribute(family)[self.rows(item_ids[real])]
        return out


@dataclass
class LogTable:
    """Events of many users, grouped by user in log order."""

    user: np.ndarray
    item: np.ndarray
    ts: np.ndarray
    request: np.ndarray
    idx: np.ndarray

    def __post_init__(self):
        for name in ("user", "item", "ts", "request", "idx"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if len(self.user) and np.any(np.diff(self.user) < 0):
            raise DataError("events must be grouped by ascending user id")
        change = np.flatnonzero(np.diff(self.user)) + 1
        self.offsets = np.concatenate([[0], change, [len(self.user)]]).astype(np.int64)
        self.user_ids = self.user[self.offsets[:-1]] if len(self.user) else np.zeros(0, dtype=np.int64)

    @property
    def num_users(self) -> int:
        return len(self.offsets) - 1

    def __len__(self):
        return len(self.user)

    def user_slice(self, u: int) -> slice:
        return slice(int(self.offsets[u]), int(self.offsets[u + 1]))

    def request_starts(self, u: int) -> np.ndarray:
        """Event indices (within the user) where a new request begins."""
        req = self.request[self.user_slice(u)]
        return np.concatenate([[0], np.flatnonzero(np.diff(req)) + 1]).astype(np.int64)


def write_events_jsonl(path, logs: LogTable) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in zip(logs.user.tolist(), logs.item.tolist(), logs.ts.tolist(),
                       logs.request.tolist(), logs.idx.tolist()):
            f.write(json.dumps(dict(zip(EVENT_KEYS, row))))
            f.write("\n")


def read_events_jsonl(path) -> LogTable:
    cols = {k: [] for k in EVENT_KEYS}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                for k in EVENT_KEYS:
                    cols[k].append(int(rec[k]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad event record ({exc})") from None
    if not cols["user_id"]:
        raise DataError(f"{path}: no events")
    return LogTable(user=cols["user_id"], item=cols["item_id"], ts=cols["ts"],
                    request=cols["request_id"], idx=cols["idx"])


def write_corpus_jsonl(path, items) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for it in items:
            rec = {"item_id": it.item_id, "genre": it.genre, "language": it.language,
                   "release": it.release_bucket}
            f.write(json.dumps(rec))
            f.write("\n")


def read_corpus_jsonl(path) -> Catalog:
    ids, genre, lang, rel = [], [], [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(int(rec["item_id"]))
                genre.append(int(rec["genre"]))
                lang.append(int(rec["language"]))
                rel.append({"classic": 0, "new": 1}[rec["release"]])
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad item record ({exc})") from None
    if not ids:
        raise DataError(f"{path}: empty corpus")
    return Catalog(ids=ids, genre=genre, language=lang, release=rel)


@dataclass
class Splits:
    """Per-user event-index boundaries: [0, pretrain_end) | [pretrain_end, sft_end) | [sft_end, n).

    The last region holds the final ``eval_requests`` requests and is used
    only for evaluation. All boundaries fall on request starts, so the regions
    are strictly ordered in time.
    """

    pretrain_end: np.ndarray
    sft_end: np.ndarray
    length: np.ndarray


def make_splits(logs: LogTable, eval_requests=2, sft_fraction=0.2) -> Splits:
    n = logs.num_users
    pt = np.zeros(n, dtype=np.int64)
    sft = np.zeros(n, dtype=np.int64)
    length = np.diff(logs.offsets)
    for u in range(n):
        starts = logs.request_starts(u)
        r = len(starts)
        test_r = min(eval_requests, r)
        train_r = r - test_r
        sft_r = int(round(train_r * sft_fraction))
        sft[u] = starts[train_r] if train_r < r else length[u]
        pt[u] = starts[train_r - sft_r] if train_r - sft_r < r else length[u]
    return Splits(pretrain_end=pt, sft_end=sft, length=length)


def pretrain_cuts(splits: Splits, horizon: int, min_history=1):
    """(user, cut) pairs whose ``horizon`` targets all lie in the pre-training region."""
    users, cuts = [], []
    for u, end in enumerate(splits.pretrain_end):
        c = np.arange(min_history, end - horizon + 1)
        users.append(np.full(len(c), u))
        cuts.append(c)
    return np.concatenate(users).astype(np.int64), np.concatenate(cuts).astype(np.int64)


def windows(logs: LogTable, users, cuts, max_len: int):
    """Left-padded context windows ending just before each cut.

    Returns (items, ts) of shape (B, max_len); padding is PAD / -inf.
    """
    users = np.asarray(users)
    cuts = np.asarray(cuts)
    B = len(users)
    pos = cuts[:, None] - max_len + np.arange(max_len)[None, :]
    valid = pos >= 0
    flat = logs.offsets[users][:, None] + np.maximum(pos, 0)
    items = np.where(valid, logs.item[flat], PAD)
    ts = np.where(valid, logs.ts[flat].astype(np.float64), -np.inf)
    return items.reshape(B, max_len), ts.reshape(B, max_len)


def events_at(logs: LogTable, users, positions):
    flat = logs.offsets[np.asarray(users)] + np.asarray(positions)
    return logs.item[flat], logs.ts[flat].astype(np.float64)


@dataclass
class SftSet:
    """Condition-labelled next-item examples; context of example i is events [0, cuts[i]) of users[i]."""

    users: np.ndarray
    cuts: np.ndarray
    targets: np.ndarray
    conditions: np.ndarray
    family: str
    skipped: int = 0

    def __len__(self):
        return len(self.users)

    def triples(self, logs: LogTable):
        for u, c, t, cond in zip(self.users, self.cuts, self.targets, self.conditions):
            s = logs.offsets[u]
            yield logs.item[s:s + c].tolist(), int(t), int(cond)


def build_sft_dataset(logs: LogTable, catalog: Catalog, family: str, splits: Splits,
                      vocab_size: int | None = None) -> SftSet:
    """One example per target in each user's SFT region, labelled with the target's ``family`` value.

    Targets whose condition falls outside ``[0, vocab_size)`` are skipped and counted.
    """
    if not family:
        raise DataError("empty condition family")
    if len(logs) == 0:
        raise DataError("no logs")
    attr = catalog.attribute(family)
    users, cuts = [], []
    for u in range(logs.num_users):
        c = np.arange(max(splits.pretrain_end[u], 1), splits.sft_end[u])
        users.append(np.full(len(c), u))
        cuts.append(c)
    users = np.concatenate(users).astype(np.int64)
    cuts = np.concatenate(cuts).astype(np.int64)
    targets = logs.item[logs.offsets[users] + cuts]
    conditions = attr[catalog.rows(targets)]
    keep = np.ones(len(users), dtype=bool)
    if vocab_size is not None:
        keep = (conditions >= 0) & (conditions < vocab_size)
    return SftSet(users[keep], cuts[keep], targets[keep], conditions[keep], family,
                  skipped=int((~keep).sum()))
