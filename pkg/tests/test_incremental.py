import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imr.apps.wordcount import float_sum_reduce, in_edge_sum_map, int_sum_accumulator, sum_reduce, wordcount_map
from imr.datagen import as_records, gen_delta, gen_docs
from imr.engine import JobSpec, ReducerKind, run_job
from imr.incremental import (
    Accumulator,
    ContractViolation,
    StateError,
    apply_delta,
    run_incremental,
    run_incremental_accumulator,
    run_initial,
)
from imr.records import DELETE, INSERT, DeltaRecord, KvRecord, MapKey

FIG4 = [(b"0", b"1:0.3;2:0.3"), (b"1", b"2:0.4"), (b"2", b"0:0.2")]


def _fig4_delta():
    return sorted([
        DeltaRecord(KvRecord(b"1", b"2:0.4"), DELETE, MapKey(0, 1)),
        DeltaRecord(KvRecord(b"3", b"0:0.1"), INSERT, MapKey(1, 0)),
        DeltaRecord(KvRecord(b"0", b"1:0.3;2:0.3"), DELETE, MapKey(0, 0)),
        DeltaRecord(KvRecord(b"0", b"2:0.6"), INSERT, MapKey(0, 0)),
    ], key=lambda d: (d.mk, d.sign != DELETE))


def test_fig4_delta_refresh(tmp_path):
    spec = JobSpec(num_partitions=3)
    run_initial(spec, [as_records(FIG4)], in_edge_sum_map, float_sum_reduce, tmp_path)
    res = run_incremental(spec, _fig4_delta(), in_edge_sum_map, float_sum_reduce, tmp_path)
    got = {k: float(v) for k, v in res.results.as_dict().items()}
    assert got == {b"0": 0.30000000000000004, b"2": 0.6}
    assert res.retractions == 1
    recompute = run_job(spec, [apply_delta(as_records(FIG4), _fig4_delta())], in_edge_sum_map, float_sum_reduce)
    assert res.results.as_dict() == recompute.as_dict()


def test_empty_delta_changes_nothing(tmp_path):
    spec = JobSpec(num_partitions=2)
    first = run_initial(spec, [as_records(gen_docs(50))], wordcount_map, sum_reduce, tmp_path)
    before = [open(p, "rb").read() for p in first.results.paths()]
    for _ in range(2):
        res = run_incremental(spec, [], wordcount_map, sum_reduce, tmp_path)
        assert res.map_calls == 0 and res.reduce_calls == 0
    assert [open(p, "rb").read() for p in first.results.paths()] == before


def _identity_map(k, v):
    return [(k, v)]


def _last_reduce(k, values):
    return [(k, max(values))]


def test_single_key_delta_reinvokes_one_reducer(tmp_path):
    spec = JobSpec(num_partitions=4)
    base = as_records([(b"k%05d" % i, b"v") for i in range(10_000)])
    run_initial(spec, [base], _identity_map, _last_reduce, tmp_path)
    r = base[1234]
    delta = [DeltaRecord(KvRecord(r.key, r.value), DELETE, r.mk),
             DeltaRecord(KvRecord(r.key, b"w"), INSERT, r.mk)]
    res = run_incremental(spec, delta, _identity_map, _last_reduce, tmp_path)
    assert res.reinvocations == 1
    assert res.results.as_dict()[r.key] == b"w"


def test_unaffected_partitions_untouched(tmp_path):
    spec = JobSpec(num_partitions=4)
    base = as_records([(b"k%03d" % i, b"v") for i in range(100)])
    first = run_initial(spec, [base], _identity_map, _last_reduce, tmp_path)
    before = {p: open(p, "rb").read() for p in first.results.paths()}
    r = base[7]
    delta = [DeltaRecord(KvRecord(r.key, r.value), DELETE, r.mk)]
    run_incremental(spec, delta, _identity_map, _last_reduce, tmp_path)
    changed = [p for p in before if open(p, "rb").read() != before[p]]
    assert len(changed) == 1


def test_wordcount_accumulator_example(tmp_path):
    spec = JobSpec(reducer=ReducerKind.ACCUMULATOR)
    run_initial(spec, [as_records([(b"d0", b"a a a a a")])], wordcount_map, int_sum_accumulator.as_reducer(), tmp_path)
    delta = [DeltaRecord(KvRecord(b"d1", b"a a b"), INSERT, MapKey(1, 0))]
    res = run_incremental_accumulator(spec, delta, wordcount_map, int_sum_accumulator, tmp_path)
    assert res.results.as_dict() == {b"a": b"7", b"b": b"1"}


def _pair_acc(a, b):
    s1, c1 = map(int, a.split(b","))
    s2, c2 = map(int, b.split(b","))
    return b"%d,%d" % (s1 + s2, c1 + c2)


def test_partial_sum_and_count_accumulator(tmp_path):
    acc = Accumulator(_pair_acc, b"0,0")
    spec = JobSpec(reducer=ReducerKind.ACCUMULATOR)
    base = as_records([(b"x", b"10,2")])
    run_initial(spec, [base], _identity_map, acc.as_reducer(), tmp_path)
    delta = [DeltaRecord(KvRecord(b"x", b"4,1"), INSERT, MapKey(1, 0))]
    res = run_incremental_accumulator(spec, delta, _identity_map, acc, tmp_path)
    assert res.results.as_dict() == {b"x": b"14,3"}


def test_accumulator_rejects_deletes(tmp_path):
    spec = JobSpec(reducer=ReducerKind.ACCUMULATOR)
    base = as_records([(b"d0", b"a")])
    run_initial(spec, [base], wordcount_map, int_sum_accumulator.as_reducer(), tmp_path)
    with pytest.raises(ContractViolation):
        run_incremental_accumulator(spec, [DeltaRecord(KvRecord(b"d0", b"a"), DELETE, base[0].mk)],
                                    wordcount_map, int_sum_accumulator, tmp_path)
    with pytest.raises(ContractViolation):
        run_incremental_accumulator(JobSpec(), [], wordcount_map, int_sum_accumulator, tmp_path)


def test_missing_store_is_an_error(tmp_path):
    spec = JobSpec(num_partitions=2)
    run_initial(spec, [as_records(gen_docs(10))], wordcount_map, sum_reduce, tmp_path)
    with pytest.raises(StateError):
        run_incremental(JobSpec(num_partitions=3), [], wordcount_map, sum_reduce, tmp_path)
    os.remove(tmp_path / "part-00001" / "mrbg.dat")
    with pytest.raises(StateError):
        run_incremental(spec, [], wordcount_map, sum_reduce, tmp_path)
    with pytest.raises(StateError):
        run_incremental(spec, [], wordcount_map, sum_reduce, tmp_path / "nowhere")


def test_initial_without_mrbg_cannot_refresh(tmp_path):
    spec = JobSpec(mrbg_enabled=False)
    run_initial(spec, [as_records(gen_docs(10))], wordcount_map, sum_reduce, tmp_path)
    with pytest.raises(StateError):
        run_incremental(JobSpec(), [], wordcount_map, sum_reduce, tmp_path)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), fraction=st.floats(0.0, 0.5),
       mix=st.sampled_from([(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)]), n=st.integers(1, 4))
def test_refresh_equals_recompute(tmp_path_factory, seed, fraction, mix, n):
    work = tmp_path_factory.mktemp("eq")
    spec = JobSpec(num_partitions=n)
    base = as_records(gen_docs(60, seed=seed, vocab=40))
    delta = gen_delta(base, fraction, seed=seed, mix=mix)
    run_initial(spec, [base], wordcount_map, sum_reduce, work)
    res = run_incremental(spec, delta, wordcount_map, sum_reduce, work)
    want = run_job(spec, [apply_delta(base, delta)], wordcount_map, sum_reduce)
    assert res.results.as_dict() == want.as_dict()
    affected = {w for d in delta for w, _ in wordcount_map(d.record.key, d.record.value)}
    assert res.reinvocations == len(affected)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), fraction=st.floats(0.0, 0.5))
def test_accumulator_agrees_with_general_path(tmp_path_factory, seed, fraction):
    base = as_records(gen_docs(40, seed=seed, vocab=30))
    delta = gen_delta(base, fraction, seed=seed, mix=(0, 0, 1))
    acc_dir, gen_dir = tmp_path_factory.mktemp("acc"), tmp_path_factory.mktemp("gen")
    aspec = JobSpec(num_partitions=2, reducer=ReducerKind.ACCUMULATOR)
    run_initial(aspec, [base], wordcount_map, int_sum_accumulator.as_reducer(), acc_dir)
    a = run_incremental_accumulator(aspec, delta, wordcount_map, int_sum_accumulator, acc_dir)
    gspec = JobSpec(num_partitions=2)
    run_initial(gspec, [base], wordcount_map, sum_reduce, gen_dir)
    g = run_incremental(gspec, delta, wordcount_map, sum_reduce, gen_dir)
    want = run_job(gspec, [apply_delta(base, delta)], wordcount_map, sum_reduce).as_dict()
    assert a.results.as_dict() == g.results.as_dict() == want
