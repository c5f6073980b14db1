import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import checkpointed_states, dense_matvec, pagerank_chained

from imr.apps import gimv_app, kmeans_app, pagerank_app
from imr.apps.codec import dec_float, enc_float
from imr.apps.gimv import blocked_matrix, blocked_vector, unblock_vector
from imr.apps.kmeans import STATE_KEY, dec_centroids
from imr.datagen import as_records, gen_graph
from imr.engine import JobError, JobSpec, Mode, Partitioner
from imr.iterative import (
    Dependency,
    DivergenceError,
    IterativeApp,
    partition_data,
    prime_map,
    replicate_small_state,
    run_iterative,
)
from imr.records import InputRecord, KvRecord, MapKey, encode_record


def spec(**kw):
    kw.setdefault("mode", Mode.ITERATIVE)
    return JobSpec(**kw)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.binary(min_size=1, max_size=6), min_size=1, max_size=40), st.integers(1, 9))
def test_structure_follows_its_state_key(keys, n):
    app = gimv_app(8, 2)
    structure = [InputRecord(k + b"," + k[:1], MapKey(0, i), b"") for i, k in enumerate(keys)]
    state = {k[:1]: b"" for k in keys}
    sparts, dparts = partition_data(app, structure, state, n)
    part = Partitioner(n)
    for p, slice_ in enumerate(sparts):
        for dk, rec in slice_:
            assert dk == rec.key.split(b",")[1]
            assert part(dk) == p
        assert slice_ == sorted(slice_, key=lambda x: (x[0], x[1].key, x[1].mk))
    for p, items in enumerate(dparts):
        assert all(part(dk) == p for dk, _ in items)
        assert items == sorted(items)


def test_single_partition_holds_everything():
    app = pagerank_app()
    recs = as_records([(b"b", b"a"), (b"a", b"b")])
    sparts, dparts = partition_data(app, recs, {b"b": b"1", b"a": b"1"}, 1)
    assert [dk for dk, _ in sparts[0]] == [b"a", b"b"]
    assert dparts[0] == [(b"a", b"1"), (b"b", b"1")]


def test_project_failure_names_key():
    app = pagerank_app()
    app.project = lambda sk: sk.decode() if sk == b"bad" else sk
    with pytest.raises(JobError, match="bad"):
        partition_data(app, as_records([(b"bad", b"")]), {}, 2)


def test_merge_join_uses_init_for_missing_state():
    structure = [(k, InputRecord(k, MapKey(0, i), b"s")) for i, k in enumerate([b"a", b"b", b"c"])]
    got = list(prime_map(structure, [(b"a", b"1"), (b"c", b"3")], lambda dk: b"init"))
    assert [args[3] for _, args in got] == [b"1", b"init", b"3"]


def test_pagerank_map_splits_rank():
    app = pagerank_app()
    out = app.map(b"0", b"1;2", b"0", enc_float(1.0))
    assert [(k, dec_float(v)) for k, v in out if v] == [(b"1", 0.5), (b"2", 0.5)]


def test_pagerank_three_cycle_fixed_point(tmp_path):
    recs = as_records([(b"a", b"b"), (b"b", b"c"), (b"c", b"a")])
    res = run_iterative(pagerank_app(0.8), spec(num_partitions=2), recs, workdir=tmp_path)
    ranks = {k: dec_float(v) for k, v in res.state.items()}
    assert ranks == {b"a": 1.0, b"b": 1.0, b"c": 1.0}
    assert abs(math.fsum(ranks.values()) - 3) < 1e-9
    assert res.converged


def test_rejects_one_to_many():
    app = pagerank_app()
    app.dependency = Dependency.ONE2MANY
    with pytest.raises(JobError, match="redefine the state key"):
        run_iterative(app, spec(), as_records([(b"a", b"")]))


def test_kmeans_points_on_centroids(tmp_path):
    pts = [(b"p0", b"0.0,0.0"), (b"p1", b"10.0,10.0")]
    app = kmeans_app([[0.0, 0.0], [10.0, 10.0]])
    res = run_iterative(app, spec(num_partitions=2), as_records(pts), workdir=tmp_path)
    assert dec_centroids(res.state[STATE_KEY]) == [[0.0, 0.0], [10.0, 10.0]]
    assert res.iterations == 2 and res.converged


def test_gimv_identity_keeps_vector(tmp_path):
    eye = [[float(i == j) for j in range(4)] for i in range(4)]
    v = [1.0, 2.0, 3.0, 4.0]
    res = run_iterative(gimv_app(4, 2), spec(num_partitions=2), as_records(blocked_matrix(eye, 2)),
                        state=blocked_vector(v, 2), workdir=tmp_path)
    assert unblock_vector(res.state, 4, 2) == v
    assert res.iterations == 1


def test_gimv_swap(tmp_path):
    res = run_iterative(gimv_app(2, 1), spec(num_partitions=2, max_iterations=1),
                        as_records(blocked_matrix([[0.0, 1.0], [1.0, 0.0]], 1)),
                        state=blocked_vector([1.0, 2.0], 1), workdir=tmp_path)
    assert unblock_vector(res.state, 2, 1) == [2.0, 1.0]


def test_gimv_blocked_matches_dense(tmp_path):
    m = [[((i * 7 + j * 3) % 5) / 10 for j in range(8)] for i in range(8)]
    v = [1.0] * 8
    res = run_iterative(gimv_app(8, 3), spec(num_partitions=3, max_iterations=4),
                        as_records(blocked_matrix(m, 3)), state=blocked_vector(v, 3), workdir=tmp_path)
    want = v
    for _ in range(4):
        want = dense_matvec(m, want)
    got = unblock_vector(res.state, 8, 3)
    assert all(abs(a - b) <= 1e-12 * max(1.0, abs(b)) for a, b in zip(got, want))


def test_replicated_bytes():
    state = {STATE_KEY: b"1.0,2.0;3.0,4.0"}
    size = len(encode_record(KvRecord(STATE_KEY, state[STATE_KEY])))
    copies, moved = replicate_small_state(state, 3)
    assert copies == [[(STATE_KEY, state[STATE_KEY])]] * 3
    assert moved == 3 * size
    assert replicate_small_state(state, 1) == ([[(STATE_KEY, state[STATE_KEY])]], size)


def test_replicated_job_counts_backward_bytes(tmp_path):
    pts = [(b"p%d" % i, b"%d.0,0.0" % i) for i in range(6)]
    res = run_iterative(kmeans_app([[0.0, 0.0], [5.0, 0.0]]), spec(num_partitions=3), as_records(pts),
                        workdir=tmp_path)
    assert res.backward_bytes > 0
    assert res.backward_bytes % 3 == 0


def test_colocated_job_moves_no_state(tmp_path):
    res = run_iterative(pagerank_app(), spec(num_partitions=4), as_records(gen_graph(50, seed=1)),
                        workdir=tmp_path)
    assert res.backward_bytes == 0
    assert all(row["backward_bytes"] == 0 for row in res.trace)


def test_divergence_aborts_with_trace(tmp_path):
    app = IterativeApp("grow", project=lambda sk: sk, map=lambda sk, sv, dk, dv: [(dk, dv)],
                       reduce=lambda k, vs: [(k, enc_float(2 * dec_float(vs[0])))],
                       init=lambda dk: enc_float(1.0), distance=lambda a, b: abs(dec_float(a) - dec_float(b)))
    with pytest.raises(DivergenceError) as ei:
        run_iterative(app, spec(divergence_patience=3), as_records([(b"x", b"")]), workdir=tmp_path)
    assert len(ei.value.trace) == 4


def test_reduce_must_emit_its_own_key(tmp_path):
    app = pagerank_app()
    app.reduce = lambda k, vs: [(k + b"!", b"1.0")]
    with pytest.raises(JobError, match="exactly one"):
        run_iterative(app, spec(), as_records([(b"a", b"b"), (b"b", b"a")]), workdir=tmp_path)


def test_iterations_match_chained_plain_jobs(tmp_path):
    records = gen_graph(60, degree=4, seed=3)
    res = run_iterative(pagerank_app(0.85), spec(num_partitions=3, max_iterations=8, tolerance=0.0),
                        as_records(records), workdir=tmp_path)
    history = pagerank_chained(records, 0.85, 8)
    assert res.iterations == 8
    for t, want in enumerate(history, start=1):
        got = {k: dec_float(v) for k, v in checkpointed_states(tmp_path, t).items()}
        assert got.keys() == want.keys()
        for k, r in want.items():
            assert abs(got[k] - r) <= 1e-12 * abs(r)
        assert abs(math.fsum(got.values()) - 60) < 1e-6


def test_pagerank_metric_decreases(tmp_path):
    res = run_iterative(pagerank_app(), spec(num_partitions=2, tolerance=1e-9),
                        as_records(gen_graph(40, seed=5)), workdir=tmp_path)
    metrics = [row["l1_delta"] for row in res.trace]
    assert all(b <= a for a, b in zip(metrics[3:], metrics[4:]))
