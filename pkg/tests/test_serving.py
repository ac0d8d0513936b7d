import io
import json
import threading

import numpy as np
import pytest

from genrec.errors import ConfigurationError, DataError
from genrec.masking import causal_blocked
from genrec.model import Model
from genrec.retrieval import build_index, last_request_cuts, query_vectors, top_k_many
from genrec.serving import (STAGES, ServeRequest, Server, batched_infer, global_fallback, latency_bench,
                            precompute_instructions, serve, serve_stdio, single_infer, write_latency_csv)

from conftest import tiny_model_config

ROCK, POP, JAZZ = 3, 1, 7


def test_instructions_follow_counts_then_lower_id():
    seq = [ROCK] * 5 + [POP] * 3 + [JAZZ]
    assert precompute_instructions(seq, P=2).conditions == (ROCK, POP)
    tie = [ROCK, POP, ROCK, POP]
    assert precompute_instructions(tie, P=2).conditions == (POP, ROCK)


def test_instructions_window_and_fallback():
    seq = [ROCK] * 10 + [POP] * 2
    assert precompute_instructions(seq, window=2, P=1).conditions == (POP,)
    assert precompute_instructions([], P=3, fallback=[5, 6, 7, 8]).conditions == (5, 6, 7)
    padded = precompute_instructions([JAZZ, JAZZ], P=3, fallback=[JAZZ, 0, 2])
    assert padded.conditions == (JAZZ, 0, 2)
    with pytest.raises(DataError):
        precompute_instructions([], P=2)
    with pytest.raises(ConfigurationError):
        precompute_instructions([1], P=0)


@pytest.fixture
def frozen(tiny_data):
    model = Model(tiny_model_config(), tiny_data[1], seed=3).freeze()
    return model, build_index(model, tiny_data[1])


def _history(tiny_data, u=0, n=9):
    logs = tiny_data[2]
    s = logs.user_slice(u)
    return logs.item[s][:n]


def test_single_condition_equals_plain_forward(frozen, tiny_data):
    model, _ = frozen
    items = _history(tiny_data)
    c = 2
    H = model.encode(items[None], causal_blocked(len(items)))
    cats = model.catalog.category_of(items, "genre")
    ref = model.branch_forward(H, 1, (cats != c)[None], condition=np.array([c])).data[0]
    assert np.array_equal(batched_infer(model, items, [c])[0], ref)


@pytest.mark.parametrize("P", [1, 2, 4, 8])
def test_batched_equals_sequential(frozen, tiny_data, P):
    model, _ = frozen
    rng = np.random.default_rng(P)
    for trial in range(5):
        u = int(rng.integers(0, tiny_data[2].num_users))
        items = _history(tiny_data, u, int(rng.integers(1, 12)))
        conds = rng.integers(0, 6, size=P).tolist()
        batched = batched_infer(model, items, conds)
        for c, out in zip(conds, batched):
            assert np.array_equal(out, single_infer(model, items, c))


def test_outputs_do_not_depend_on_batch_companions(frozen, tiny_data):
    model, _ = frozen
    items = _history(tiny_data)
    a = batched_infer(model, items, [4, 0, 1])[0]
    b = batched_infer(model, items, [5, 4])[1]
    assert np.array_equal(a, b)


def test_unknown_condition_gets_error_entry(frozen, tiny_data):
    model, _ = frozen
    out = batched_infer(model, _history(tiny_data), [1, 99, -1, 2])
    assert "error" in out[1] and "error" in out[2]
    assert out[0].shape == (16,) and out[3].shape == (16,)


def test_serve_returns_one_list_per_cached_condition(frozen, tiny_data):
    model, index = frozen
    logs = tiny_data[2]
    server = Server(model, index, P=3, fallback=global_fallback(logs, tiny_data[1]))
    server.precompute(logs)
    items = _history(tiny_data, 2).tolist()
    resp = server.serve(ServeRequest(int(logs.user_ids[2]), items, k=10))
    assert [r["condition"] for r in resp.results] == list(server.caches[2].conditions)
    assert all(len(r["items"]) == 10 for r in resp.results)
    assert set(resp.timings_us) == set(STAGES)
    assert resp.cache_computed_at == int(logs.ts[logs.user_slice(2)][-1])
    assert server.cache_misses == 0


def test_missing_cache_is_computed_and_counted(frozen, tiny_data):
    model, index = frozen
    server = Server(model, index, P=2, fallback=[0, 1])
    resp = serve(model, index, ServeRequest(777, _history(tiny_data).tolist(), k=5), server)
    assert server.cache_misses == 1 and 777 in server.caches
    assert len(resp.results) == 2
    server.serve(ServeRequest(777, _history(tiny_data).tolist(), k=5))
    assert server.cache_misses == 1


def test_index_from_another_checkpoint_is_rejected(frozen, tiny_data):
    model, _ = frozen
    other = Model(tiny_model_config(), tiny_data[1], seed=99).freeze()
    with pytest.raises(ConfigurationError):
        Server(model, build_index(other, tiny_data[1]))


def test_serving_matches_offline_evaluation(frozen, tiny_data):
    model, index = frozen
    logs = tiny_data[2]
    users, cuts = last_request_cuts(logs)
    users, cuts = users[:10], cuts[:10]
    cond = np.full(len(users), 2)
    offline = top_k_many(index, query_vectors(model, logs, users, cuts, cond), 20)
    server = Server(model, index)
    for b, (u, c) in enumerate(zip(users, cuts)):
        s = logs.offsets[u]
        hist = logs.item[s:s + c][-model.config.max_seq_len:]
        resp = server.serve(ServeRequest(int(u), hist.tolist(), k=20), conditions=[2])
        assert resp.results[0]["items"] == offline[b].tolist()


def test_concurrent_requests_match_serial_results(frozen, tiny_data):
    model, index = frozen
    server = Server(model, index, P=2, fallback=[0, 1])
    reqs = [ServeRequest(u, _history(tiny_data, u).tolist(), k=8) for u in range(8)]
    server.precompute(tiny_data[2])
    serial = [server.serve(r).results for r in reqs]
    got = [None] * len(reqs)

    def work(i):
        got[i] = server.serve(reqs[i]).results

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(reqs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert got == serial


def test_serving_temporal_mask_is_optional(frozen, tiny_data):
    model, index = frozen
    logs = tiny_data[2]
    s = logs.user_slice(0)
    items, ts = logs.item[s][:10].tolist(), logs.ts[s][:10].tolist()
    req = ServeRequest(0, items, k=10, timestamps=ts, now=ts[-1])
    plain = Server(model, index, P=2, fallback=[0, 1]).serve(req)
    masked = Server(model, index, P=2, fallback=[0, 1], serve_temporal=True, delta_tau=900).serve(req)
    assert plain.results != masked.results


def test_stdio_mode(frozen, tiny_data):
    model, index = frozen
    server = Server(model, index, P=2, fallback=[0, 1])
    lines = [json.dumps({"user_id": 1, "items": _history(tiny_data, 1).tolist(), "k": 3}), "", "not json"]
    out = io.StringIO()
    assert serve_stdio(server, io.StringIO("\n".join(lines) + "\n"), out) == 2
    first, second = [json.loads(x) for x in out.getvalue().splitlines()]
    assert len(first["results"]) == 2 and len(first["results"][0]["items"]) == 3
    assert "error" in second


def test_latency_bench_rows(frozen, tiny_data, tmp_path):
    model, index = frozen
    server = Server(model, index, fallback=[0, 1, 2, 3, 4, 5])
    reqs = [ServeRequest(u, _history(tiny_data, u).tolist(), k=5) for u in range(3)]
    rows = latency_bench(server, reqs, (1, 2), trials=2)
    assert [(p, s) for p, s, _, _ in rows] == [(p, s) for p in (1, 2) for s in STAGES]
    assert all(med <= p95 for _, _, med, p95 in rows)
    write_latency_csv(tmp_path / "lat.csv", rows)
    assert (tmp_path / "lat.csv").read_text().splitlines()[0] == "P,stage,median_us,p95_us"
