import numpy as np
import pytest

from genrec.data import write_events_jsonl
from genrec.errors import ConfigurationError
from genrec.synth import (GENRE_ZIPF, SynthConfig, UserProfile, catalog_of, generate_corpus, generate_dataset,
                          generate_user_log, make_profile, masked_fraction_report, shuffle_within_requests)


def test_empty_and_single_genre_corpus():
    assert generate_corpus(0, 5, 2, seed=1) == []
    assert {it.genre for it in generate_corpus(50, 1, 2, seed=1)} == {0}


def test_corpus_is_deterministic_and_valid():
    a = generate_corpus(300, 7, 3, seed=4)
    assert a == generate_corpus(300, 7, 3, seed=4)
    assert a != generate_corpus(300, 7, 3, seed=5)
    assert len({it.item_id for it in a}) == 300
    assert all(0 <= it.genre < 7 and 0 <= it.language < 3 for it in a)
    assert {it.release_bucket for it in a} <= {"new", "classic"}


def test_genre_histogram_follows_zipf():
    items = generate_corpus(10_000, 20, 5, seed=7)
    observed = np.bincount([it.genre for it in items], minlength=20)
    # independent re-derivation of the Zipf(1.1) expectation
    weights = np.array([1.0 / (r ** GENRE_ZIPF) for r in range(1, 21)])
    expected = 10_000 * weights / weights.sum()
    assert np.all(np.abs(observed - expected) < 4 * np.sqrt(expected) + 1)
    assert observed[0] > observed[5] > observed[19]


def _profile(k=6, seed=0):
    return make_profile(np.random.default_rng(seed), k)


def test_profile_rejects_invalid_weights():
    with pytest.raises(ConfigurationError):
        UserProfile(interest=np.array([0.5, 0.6]))
    with pytest.raises(ConfigurationError):
        UserProfile(interest=np.array([1.5, -0.5]))


def test_user_log_structure():
    corpus = generate_corpus(120, 6, 2, seed=0)
    events = generate_user_log(_profile(), 12, 4, 900.0, seed=3, corpus=corpus, user_id=5)
    assert len(events) == 48
    ts = [e.timestamp for e in events]
    req = [e.request_id for e in events]
    assert ts == sorted(ts) and req == sorted(req)
    for r in set(req):
        group = [e for e in events if e.request_id == r]
        assert len({e.timestamp for e in group}) == 1
        assert sorted(e.within_request_index for e in group) == [0, 1, 2, 3]
    assert len({e.request_id for e in events}) == 12


def test_single_item_requests_degenerate_to_sequential_logging():
    corpus = generate_corpus(80, 4, 2, seed=0)
    events = generate_user_log(_profile(4), 20, 1, 600.0, seed=1, corpus=corpus)
    assert all(e.within_request_index == 0 for e in events)
    assert all(a.timestamp < b.timestamp for a, b in zip(events, events[1:]))


def test_user_log_rejects_bad_parameters():
    corpus = generate_corpus(40, 4, 2, seed=0)
    with pytest.raises(ConfigurationError):
        generate_user_log(_profile(4), 3, 0, 900.0, seed=0, corpus=corpus)
    with pytest.raises(ConfigurationError):
        generate_user_log(_profile(4), 3, 2, 0.0, seed=0, corpus=corpus)


def test_mean_request_interval_within_five_percent():
    cfg = SynthConfig(num_items=300, num_genres=6, num_users=300, num_requests=40, seed=11)
    _, _, logs = generate_dataset(cfg)
    gaps = []
    for u in range(logs.num_users):
        s = logs.user_slice(u)
        starts = logs.request_starts(u)
        gaps.extend(np.diff(logs.ts[s][starts]).tolist())
    assert len(gaps) >= 10_000
    assert abs(np.mean(gaps) - 900.0) / 900.0 < 0.05


def test_same_seed_gives_byte_identical_jsonl(tmp_path):
    cfg = SynthConfig(num_items=100, num_genres=5, num_users=10, num_requests=6, seed=2)
    for name in ("a", "b"):
        write_events_jsonl(tmp_path / f"{name}.jsonl", generate_dataset(cfg)[2])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_users_are_independent_of_population_size():
    small = generate_dataset(SynthConfig(num_items=100, num_genres=5, num_users=3, num_requests=6, seed=2))[2]
    big = generate_dataset(SynthConfig(num_items=100, num_genres=5, num_users=8, num_requests=6, seed=2))[2]
    n = len(small)
    assert np.array_equal(small.item, big.item[:n]) and np.array_equal(small.ts, big.ts[:n])


def test_temporal_window_always_hides_the_current_request(tiny_data):
    logs = tiny_data[2]
    report = masked_fraction_report(logs, 900.0)
    assert report["same_request"] == 1.0
    assert 0.0 < report["previous_request"] < 1.0
    assert report["mean_masked_positions"] >= (4 - 1) / 2


def test_within_request_shuffle_keeps_request_contents(tiny_data):
    logs = tiny_data[2]
    shuffled = shuffle_within_requests(logs, seed=0)
    assert not np.array_equal(shuffled.item, logs.item)
    for r in np.unique(logs.request)[:50]:
        sel = logs.request == r
        assert sorted(logs.item[sel]) == sorted(shuffled.item[sel])
    assert np.array_equal(shuffled.ts, logs.ts)


def test_catalog_of_maps_release_buckets():
    items = generate_corpus(30, 3, 2, seed=0)
    cat = catalog_of(items)
    assert [it.release_bucket == "new" for it in items] == (cat.release == 1).tolist()
