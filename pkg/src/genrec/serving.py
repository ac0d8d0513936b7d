"""In-process serving: cached per-user instructions and multi-condition retrieval sharing one backbone pass.

For a request the backbone and the branch-1 key/value projections are
computed once; each condition then only runs its own query row under its
condition-sparse mask, followed by an exact top-K search.
"""

from __future__ import annotations

import csv
import json
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import Catalog, LogTable
from .errors import ConfigurationError, DataError
from .masking import causal_blocked, temporal_columns
from .model import Model
from .retrieval import RetrievalIndex, top_k

STAGES = ("backbone", "branches", "search", "total")


@dataclass(frozen=True)
class InstructionCache:
    conditions: tuple
    computed_at: int
    window: int


def precompute_instructions(categories, window=200, P=4, fallback=(), computed_at=0) -> InstructionCache:
    """Top-``P`` categories by count over the last ``window`` events, ties to the lower id.

    ``categories`` is the per-event category sequence of one user in log
    order. Short lists are padded from ``fallback`` (global popularity order).
    """
    if P < 1:
        raise ConfigurationError("P must be >= 1")
    recent = list(categories)[-window:] if window > 0 else []
    counts = Counter(int(c) for c in recent)
    chosen = [c for c, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:P]
    for c in fallback:
        if len(chosen) >= P:
            break
        if int(c) not in chosen:
            chosen.append(int(c))
    if not chosen:
        raise DataError("no engagement in the window and no fallback categories")
    return InstructionCache(tuple(chosen), int(computed_at), int(window))


def global_fallback(logs: LogTable, catalog: Catalog, family="genre") -> list:
    cats = catalog.category_of(logs.item, family)
    counts = Counter(cats.tolist())
    return [c for c, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


@dataclass
class SharedContext:
    """Backbone output and branch keys/values of one sequence, reused by every condition."""

    H: object
    kv: object
    categories: np.ndarray
    extra_blocked: np.ndarray


def encode_once(model: Model, items, family="genre", timestamps=None, now=None, delta_tau=None) -> SharedContext:
    items = np.asarray(items, dtype=np.int64)[-model.config.max_seq_len:]
    if items.size == 0:
        raise DataError("empty behaviour sequence")
    n = len(items)
    extra = np.zeros(n, dtype=bool)
    if now is not None and delta_tau is not None and timestamps is not None:
        ts = np.asarray(timestamps, dtype=np.float64)[-n:]
        extra = temporal_columns(ts, now, delta_tau)
    blocked = causal_blocked(n) | extra[None, :]
    H = model.encode(items[None], blocked)
    return SharedContext(H, model.branch_context(H, 1), model.catalog.category_of(items, family), extra)


def condition_query(model: Model, ctx: SharedContext, c: int) -> np.ndarray:
    row = (ctx.extra_blocked | (ctx.categories != c))[None]
    return model.branch_query(ctx.H, ctx.kv, 1, row, condition=np.array([c])).data[0]


def _check_condition(model, c):
    if not 0 <= int(c) < model.config.num_conditions:
        return f"unknown condition id {c}"
    return None


def batched_infer(model: Model, items, conditions, family="genre", **mask_kw) -> list:
    """Branch-1 query vectors for each condition, in input order, from one backbone pass.

    Unknown condition ids yield ``{"error": ...}`` in their slot; the rest are served.
    """
    ctx = encode_once(model, items, family, **mask_kw)
    out = []
    for c in conditions:
        err = _check_condition(model, c)
        out.append({"error": err} if err else condition_query(model, ctx, int(c)))
    return out


def single_infer(model: Model, items, c, family="genre", **mask_kw):
    """One condition, backbone recomputed: the sequential reference for :func:`batched_infer`."""
    return batched_infer(model, items, [c], family, **mask_kw)[0]


@dataclass
class ServeRequest:
    user_id: int
    items: list
    k: int = 50
    timestamps: list | None = None
    now: int | None = None

    @classmethod
    def from_json(cls, line: str) -> "ServeRequest":
        rec = json.loads(line)
        return cls(int(rec["user_id"]), [int(i) for i in rec["items"]], int(rec.get("k", 50)),
                   rec.get("timestamps"), rec.get("now"))


@dataclass
class ServeResponse:
    user_id: int
    results: list  # one {"condition", "items"} or {"condition", "error"} per cached condition
    timings_us: dict
    cache_computed_at: int

    def to_json(self) -> str:
        return json.dumps({"user_id": self.user_id, "results": self.results, "timings_us": self.timings_us,
                           "cache_computed_at": self.cache_computed_at}, sort_keys=True)


@dataclass
class Server:
    model: Model
    index: RetrievalIndex
    family: str = "genre"
    P: int = 4
    window: int = 200
    fallback: list = field(default_factory=list)
    serve_temporal: bool = False
    delta_tau: float = 900.0
    caches: dict = field(default_factory=dict)
    cache_misses: int = 0

    def __post_init__(self):
        if self.index.checkpoint_hash and self.index.checkpoint_hash != self.model.fingerprint():
            raise ConfigurationError("index was built from a different checkpoint than the model")

    def precompute(self, logs: LogTable, upto=None):
        """Refresh instruction caches from ``logs`` (events before ``upto[u]`` per user if given)."""
        cats = self.model.catalog.category_of(logs.item, self.family)
        for u in range(logs.num_users):
            s = logs.user_slice(u)
            end = s.stop if upto is None else s.start + int(upto[u])
            self.caches[int(logs.user_ids[u])] = precompute_instructions(
                cats[s.start:end], self.window, self.P, self.fallback,
                computed_at=int(logs.ts[end - 1]) if end > s.start else 0)

    def serve(self, req: ServeRequest, conditions=None) -> ServeResponse:
        t0 = time.perf_counter_ns()
        cache = self.caches.get(req.user_id)
        if cache is None:
            self.cache_misses += 1
            cats = self.model.catalog.category_of(np.asarray(req.items, dtype=np.int64), self.family)
            cache = precompute_instructions(cats, self.window, self.P, self.fallback, computed_at=req.now or 0)
            self.caches[req.user_id] = cache
        conds = list(cache.conditions if conditions is None else conditions)
        mask_kw = {}
        if self.serve_temporal and req.now is not None:
            mask_kw = {"timestamps": req.timestamps, "now": req.now, "delta_tau": self.delta_tau}
        ctx = encode_once(self.model, req.items, self.family, **mask_kw)
        t1 = time.perf_counter_ns()
        queries = []
        for c in conds:
            err = _check_condition(self.model, c)
            queries.append(err if err else condition_query(self.model, ctx, int(c)))
        t2 = time.perf_counter_ns()
        results = []
        for c, q in zip(conds, queries):
            if isinstance(q, str):
                results.append({"condition": int(c), "error": q})
            else:
                results.append({"condition": int(c), "items": top_k(self.index, q, req.k).tolist()})
        t3 = time.perf_counter_ns()
        timings = {"backbone": (t1 - t0) / 1e3, "branches": (t2 - t1) / 1e3, "search": (t3 - t2) / 1e3,
                   "total": (t3 - t0) / 1e3}
        return ServeResponse(req.user_id, results, timings, cache.computed_at)


def serve(model, index, request: ServeRequest, server: Server | None = None) -> ServeResponse:
    server = server or Server(model, index)
    return server.serve(request)


def serve_stdio(server: Server, stdin, stdout) -> int:
    """One JSON request per input line, one JSON response per output line. Returns lines served."""
    served = 0
    for line in stdin:
        if not line.strip():
            continue
        try:
            resp = server.serve(ServeRequest.from_json(line)).to_json()
        except (ValueError, KeyError, TypeError, DataError) as exc:
            resp = json.dumps({"error": str(exc)})
        stdout.write(resp + "\n")
        stdout.flush()
        served += 1
    return served


def latency_bench(server: Server, requests, P_values=(1, 2, 4, 8), trials=20, warmup=3) -> list:
    """Rows (P, stage, median_us, p95_us) over ``trials`` passes through ``requests``.

    Each P uses the first P conditions of the global fallback order so the
    workload differs only in the number of conditions.
    """
    base = list(server.fallback) or list(range(server.model.config.num_conditions))
    for req in requests[:warmup]:
        server.serve(req, base[:1])
    rows = []
    for P in P_values:
        conds = (base * (P // max(len(base), 1) + 1))[:P]
        samples = {s: [] for s in STAGES}
        for _ in range(trials):
            for req in requests:
                t = server.serve(req, conds).timings_us
                for s in STAGES:
                    samples[s].append(t[s])
        for s in STAGES:
            v = np.asarray(samples[s])
            rows.append((P, s, float(np.median(v)), float(np.percentile(v, 95))))
    return rows


def write_latency_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["P", "stage", "median_us", "p95_us"])
        for P, s, med, p95 in rows:
            w.writerow([P, s, f"{med:.1f}", f"{p95:.1f}"])
