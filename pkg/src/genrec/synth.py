"""Synthetic item corpora and batch-exposure interaction logs.

Each user issues requests; a request exposes ``m`` items at one timestamp,
mostly from a per-request "burst" genre, and the log writes them out in an
arbitrary order. Long-horizon signal lives only in the slowly drifting
genre-interest profile; adjacent requests share their burst genre with
probability ``burst_persistence``, which is what rewards short-sighted models
at small horizons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Catalog, LogTable
from .errors import ConfigurationError

RELEASE_BUCKETS = ("classic", "new")
GENRE_ZIPF = 1.1


@dataclass(frozen=True)
class Item:
    item_id: int
    genre: int
    language: int
    release_bucket: str


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    timestamp: int
    request_id: int
    within_request_index: int


@dataclass
class UserProfile:
    interest: np.ndarray
    drift: float = 0.02
    burst_persistence: float = 0.5
    burst_bias: float = 0.8
    concentration: float = 0.3
    burst: int | None = None

    def __post_init__(self):
        w = np.asarray(self.interest, dtype=np.float64)
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ConfigurationError("interest weights must be nonnegative and sum to 1")
        self.interest = w


@dataclass
class SynthConfig:
    num_items: int = 2000
    num_genres: int = 20
    num_languages: int = 5
    new_fraction: float = 0.3
    num_users: int = 10000
    num_requests: int = 40
    items_per_request: int = 5
    mean_request_interval: float = 900.0
    item_popularity_exponent: float = 1.0
    concentration: float = 0.3
    drift: float = 0.02
    burst_persistence: float = 0.5
    burst_bias: float = 0.8
    seed: int = 7


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def generate_corpus(num_items, num_genres, num_languages, seed, new_fraction=0.3) -> list[Item]:
    if num_genres < 1 or num_languages < 1:
        raise ConfigurationError("vocabulary sizes must be >= 1")
    rng = np.random.default_rng(seed)
    genres = rng.choice(num_genres, size=num_items, p=zipf_probs(num_genres, GENRE_ZIPF))
    langs = rng.choice(num_languages, size=num_items, p=zipf_probs(num_languages, GENRE_ZIPF))
    new = rng.random(num_items) < new_fraction
    return [
        Item(i, int(g), int(l), RELEASE_BUCKETS[int(r)])
        for i, (g, l, r) in enumerate(zip(genres, langs, new))
    ]


def catalog_of(items: list[Item]) -> Catalog:
    return Catalog(
        ids=np.array([it.item_id for it in items], dtype=np.int64),
        genre=np.array([it.genre for it in items], dtype=np.int64),
        language=np.array([it.language for it in items], dtype=np.int64),
        release=np.array([RELEASE_BUCKETS.index(it.release_bucket) for it in items], dtype=np.int64),
    )


@dataclass
class _GenrePools:
    """Per-genre item ids with popularity-weighted sampling cdfs."""

    ids: list = field(default_factory=list)
    cdfs: list = field(default_factory=list)

    @classmethod
    def build(cls, catalog: Catalog, num_genres: int, exponent: float):
        pools = cls()
        for g in range(num_genres):
            ids = catalog.ids[catalog.genre == g]
            pools.ids.append(ids)
            # lower ids are more popular within their genre
            pools.cdfs.append(np.cumsum(zipf_probs(len(ids), exponent)) if len(ids) else None)
        return pools

    def sample(self, rng, genre):
        cdf = self.cdfs[genre]
        j = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)
        return int(self.ids[genre][j])


def make_profile(rng, num_genres, concentration=0.3, genre_prior=None, **kwargs) -> UserProfile:
    prior = zipf_probs(num_genres, GENRE_ZIPF) if genre_prior is None else genre_prior
    interest = rng.dirichlet(np.maximum(concentration * num_genres * prior, 1e-3))
    return UserProfile(interest=interest, concentration=concentration, **kwargs)


def _sample_genre(rng, weights, available):
    w = weights * available
    return int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right").clip(0, len(w) - 1))


def _simulate(profile, num_requests, m, mean_interval, rng, pools, start_time, first_request_id):
    if m < 1:
        raise ConfigurationError("items_per_request must be >= 1")
    if mean_interval <= 0:
        raise ConfigurationError("mean_request_interval must be > 0")
    num_genres = len(profile.interest)
    available = np.array([len(ids) > 0 for ids in pools.ids], dtype=np.float64)
    prior = zipf_probs(num_genres, GENRE_ZIPF)
    interest = profile.interest.copy()
    burst = profile.burst
    n = num_requests * m
    items = np.empty(n, dtype=np.int64)
    ts = np.empty(n, dtype=np.int64)
    req = np.empty(n, dtype=np.int64)
    idx = np.empty(n, dtype=np.int64)
    t = int(start_time)
    for r in range(num_requests):
        if r > 0:
            t += max(1, int(round(rng.exponential(mean_interval))))
            fresh = rng.dirichlet(np.maximum(profile.concentration * num_genres * prior, 1e-3))
            interest = (1.0 - profile.drift) * interest + profile.drift * fresh
        if burst is None or rng.random() >= profile.burst_persistence:
            burst = _sample_genre(rng, interest, available)
        chosen: list[int] = []
        while len(chosen) < m:
            g = burst if rng.random() < profile.burst_bias else _sample_genre(rng, interest, available)
            it = pools.sample(rng, g)
            if it not in chosen or len(pools.ids[g]) <= len(chosen):
                chosen.append(it)
        order = rng.permutation(m)
        s = slice(r * m, (r + 1) * m)
        items[s] = np.asarray(chosen)[order]
        ts[s] = t
        req[s] = first_request_id + r
        idx[s] = np.arange(m)
    profile.interest = interest
    profile.burst = burst
    return items, ts, req, idx


def user_rng(seed: int, user_id: int):
    return np.random.default_rng(np.random.SeedSequence([seed, user_id]))


def generate_user_log(profile, num_requests, items_per_request, mean_request_interval, seed,
                      corpus, user_id=0, start_time=0) -> list[InteractionEvent]:
    """One user's serialized log; ``profile`` is advanced in place."""
    catalog = corpus if isinstance(corpus, Catalog) else catalog_of(corpus)
    pools = _GenrePools.build(catalog, len(profile.interest), 1.0)
    rng = user_rng(seed, user_id)
    items, ts, req, idx = _simulate(profile, num_requests, items_per_request, mean_request_interval,
                                    rng, pools, start_time, user_id * num_requests)
    return [
        InteractionEvent(user_id, int(i), int(t), int(q), int(x))
        for i, t, q, x in zip(items, ts, req, idx)
    ]


def generate_logs(catalog: Catalog, cfg: SynthConfig) -> LogTable:
    pools = _GenrePools.build(catalog, cfg.num_genres, cfg.item_popularity_exponent)
    n = cfg.num_requests * cfg.items_per_request
    cols = {k: np.empty(cfg.num_users * n, dtype=np.int64) for k in ("user", "item", "ts", "request", "idx")}
    for u in range(cfg.num_users):
        rng = user_rng(cfg.seed, u)
        profile = make_profile(
            rng, cfg.num_genres, concentration=cfg.concentration, drift=cfg.drift,
            burst_persistence=cfg.burst_persistence, burst_bias=cfg.burst_bias,
        )
        start = 1_700_000_000 + int(rng.integers(0, 86_400))
        items, ts, req, idx = _simulate(profile, cfg.num_requests, cfg.items_per_request,
                                        cfg.mean_request_interval, rng, pools, start, u * cfg.num_requests)
        s = slice(u * n, (u + 1) * n)
        cols["user"][s] = u
        cols["item"][s] = items
        cols["ts"][s] = ts
        cols["request"][s] = req
        cols["idx"][s] = idx
    return LogTable(**cols)


def generate_dataset(cfg: SynthConfig):
    items = generate_corpus(cfg.num_items, cfg.num_genres, cfg.num_languages, cfg.seed, cfg.new_fraction)
    catalog = catalog_of(items)
    return items, catalog, generate_logs(catalog, cfg)


def masked_fraction_report(logs: LogTable, delta_tau: float) -> dict:
    """How much of the preceding history the temporal mask hides, per target.

    Averages over every target position with at least one earlier event:
    ``same_request`` is the share of same-request predecessors masked (always
    1 by construction), ``previous_request`` the share of targets whose
    previous request also falls inside the window.
    """
    same_hits = same_total = prev_hits = prev_total = 0
    masked_positions = 0
    targets = 0
    for u in range(logs.num_users):
        s = logs.user_slice(u)
        ts, req = logs.ts[s], logs.request[s]
        for n in range(1, len(ts)):
            tau = ts[n]
            win = (ts[:n] >= tau - delta_tau) & (ts[:n] <= tau)
            same = req[:n] == req[n]
            same_total += int(same.sum())
            same_hits += int((win & same).sum())
            prev_req = req[:n][~same]
            if prev_req.size:
                prev_total += 1
                prev_hits += int(win[req[:n] == prev_req[-1]].all())
            masked_positions += int(win.sum())
            targets += 1
    return {
        "targets": targets,
        "mean_masked_positions": masked_positions / max(targets, 1),
        "same_request": same_hits / max(same_total, 1),
        "previous_request": prev_hits / max(prev_total, 1),
    }


def shuffle_within_requests(logs: LogTable, seed: int) -> LogTable:
    """Copy of ``logs`` with each request's items re-permuted (timestamps and ids untouched)."""
    rng = np.random.default_rng(seed)
    item = logs.item.copy()
    bounds = np.concatenate([[0], np.flatnonzero(np.diff(logs.request) != 0) + 1, [len(logs)]])
    for a, b in zip(bounds[:-1], bounds[1:]):
        item[a:b] = item[a:b][rng.permutation(b - a)]
    return LogTable(user=logs.user, item=item, ts=logs.ts, request=logs.request, idx=logs.idx)
