"""Additive attention masks: causal, temporal, condition-sparse and truncation.

A mask entry is either 0 (open) or -inf (blocked). Internally the blocked set
is a boolean matrix, so composing sources is a logical OR and never has to
add two infinities.

The temporal, condition and truncation sources depend only on the key column,
so the ``*_columns`` helpers return a per-column boolean vector (or a batch of
them); the ``build_*`` functions expand that to the full square mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

CAUSAL = "causal"
TEMPORAL = "temporal"
SPARSE = "sparse"
TRUNCATION = "truncation"
PADDING = "padding"

OPEN_CHAR = "."
BLOCKED_CHAR = "X"


@dataclass(frozen=True)
class AttentionMask:
    blocked: np.ndarray  # (n, n) bool, True where the entry is -inf
    provenance: frozenset = frozenset()

    def __post_init__(self):
        b = np.asarray(self.blocked, dtype=bool)
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ConfigurationError(f"attention mask must be square, got shape {b.shape}")
        b = b.copy()
        b.setflags(write=False)
        object.__setattr__(self, "blocked", b)
        object.__setattr__(self, "provenance", frozenset(self.provenance))

    @property
    def n(self) -> int:
        return self.blocked.shape[0]

    @property
    def entries(self) -> np.ndarray:
        return np.where(self.blocked, -np.inf, 0.0)

    def __eq__(self, other):
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.provenance == other.provenance and np.array_equal(self.blocked, other.blocked)

    def __hash__(self):
        return hash((self.blocked.tobytes(), self.n, self.provenance))

    def to_text(self) -> str:
        rows = ("".join(BLOCKED_CHAR if b else OPEN_CHAR for b in row) for row in self.blocked)
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str, provenance=()) -> "AttentionMask":
        rows = [r for r in text.splitlines() if r]
        return cls(np.array([[c == BLOCKED_CHAR for c in r] for r in rows], dtype=bool), frozenset(provenance))


def _column_mask(cols, tag) -> AttentionMask:
    cols = np.asarray(cols, dtype=bool)
    return AttentionMask(np.broadcast_to(cols, (cols.size, cols.size)), frozenset({tag}))


def causal_blocked(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def build_causal_mask(n: int) -> AttentionMask:
    if n < 1:
        raise DataError("cannot build a mask for an empty sequence")
    return AttentionMask(causal_blocked(n), frozenset({CAUSAL}))


def temporal_columns(timestamps, tau_target, delta_tau):
    """Columns whose timestamp lies in the closed window [tau_target - delta_tau, tau_target].

    Works on a single sequence ``(n,)`` with a scalar anchor, or on a batch
    ``(B, n)`` with anchors ``(B,)``.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    tau = np.asarray(tau_target, dtype=np.float64)
    if ts.ndim == 2:
        tau = tau[:, None]
    return (ts >= tau - delta_tau) & (ts <= tau)


def build_temporal_mask(timestamps, tau_target: float, delta_tau: float) -> AttentionMask:
    ts = np.asarray(timestamps, dtype=np.float64)
    if delta_tau < 0:
        raise ConfigurationError(f"delta_tau must be >= 0, got {delta_tau}")
    if ts.size == 0:
        raise DataError("cannot build a mask for an empty sequence")
    if np.any(np.diff(ts) < 0):
        raise DataError("timestamps must be nondecreasing")
    return _column_mask(temporal_columns(ts, tau_target, delta_tau), TEMPORAL)


def condition_columns(categories, condition):
    """Columns whose category differs from ``condition`` (scalar, or ``(B,)`` for a batch)."""
    cats = np.asarray(categories)
    c = np.asarray(condition)
    if cats.ndim == 2:
        c = c[:, None]
    return cats != c


def build_condition_mask(item_categories, c) -> AttentionMask:
    cats = np.asarray(item_categories)
    if cats.size == 0:
        raise DataError("cannot build a mask for an empty sequence")
    return _column_mask(condition_columns(cats, c), SPARSE)


def truncation_columns(n: int, k: int):
    """Columns outside the window of the first ``n - k + 1`` positions."""
    if not 1 <= k <= n:
        raise ConfigurationError(f"branch index k={k} must satisfy 1 <= k <= n={n}")
    return np.arange(n) > n - k


def build_truncation_mask(n: int, k: int) -> AttentionMask:
    return _column_mask(truncation_columns(n, k), TRUNCATION)


def combine(masks) -> AttentionMask:
    masks = list(masks)
    if not masks:
        raise ConfigurationError("combine needs at least one mask")
    n = masks[0].n
    if any(m.n != n for m in masks):
        raise ConfigurationError(f"cannot combine masks of lengths {[m.n for m in masks]}")
    blocked = np.zeros((n, n), dtype=bool)
    tags = set()
    for m in masks:
        blocked |= m.blocked
        tags |= m.provenance
    return AttentionMask(blocked, frozenset(tags))


def last_open(row_blocked):
    """Index of the last open column per row, -1 where the whole row is blocked."""
    row_blocked = np.asarray(row_blocked, dtype=bool)
    n = row_blocked.shape[-1]
    open_ = ~row_blocked
    rev = np.argmax(open_[..., ::-1], axis=-1)
    return np.where(open_.any(axis=-1), n - 1 - rev, -1)
