"""Incremental one-step processing.

An initial run preserves every reduce group's edges in a per-partition
:class:`~imr.mrbg.MRBGStore` and keeps the reduce outputs in a
:class:`ResultStore`.  A later delta run maps only the delta records
(deletes become tombstone edges), merges the shuffled delta into the
stores and re-reduces just the affected K2 groups.
"""

import json
import os
import shutil
from dataclasses import dataclass, field
from typing import Callable, Dict, List

from .engine import (
    JobError,
    JobSpec,
    Partitioner,
    ReducerKind,
    TaskError,
    WorkerPool,
    as_input_records,
    group_by_key,
    map_task,
    shuffle_sort,
)
from .metrics import Metrics
from .mrbg import MRBGStore
from .records import (
    DELETE,
    INSERT,
    KIND_KV,
    DeltaRecord,
    InputRecord,
    KvRecord,
    decode_frame,
    encode_record,
    open_sorted_run,
    write_sorted_run,
)

JOB_FILE = "job.json"


class ContractViolation(JobError):
    pass


class StateError(JobError):
    pass


def _pack_outputs(outs):
    return b"".join(encode_record(KvRecord(k, v)) for k, v in outs)


def _unpack_outputs(data):
    outs, pos = [], 0
    while pos < len(data):
        r, pos = decode_frame(data, pos, KIND_KV)
        outs.append(r)
    return outs


class ResultStore:
    """Final (K3, V3) outputs per partition, plus which K2 produced them.

    ``results-NNNNN.run`` holds the sorted outputs; ``prov-NNNNN.run`` maps
    each reduce key to the outputs it emitted so a re-run can replace them.
    Patches are copy-on-write: a new file is written and renamed over.
    """

    def __init__(self, directory, n):
        self.dir = str(directory)
        self.n = n
        self.prov: List[Dict[bytes, List[KvRecord]]] = []
        for p in range(n):
            path = self._prov_path(p)
            if os.path.exists(path):
                self.prov.append({r.key: _unpack_outputs(r.value) for r in open_sorted_run(path)})
            else:
                self.prov.append({})

    def _prov_path(self, p):
        return os.path.join(self.dir, f"prov-{p:05d}.run")

    def result_path(self, p):
        return os.path.join(self.dir, f"results-{p:05d}.run")

    @classmethod
    def create(cls, directory, provenance):
        os.makedirs(directory, exist_ok=True)
        store = cls.__new__(cls)
        store.dir = str(directory)
        store.n = len(provenance)
        store.prov = [dict(p) for p in provenance]
        for p in range(store.n):
            store._write(p)
        return store

    def _write(self, p):
        prov = self.prov[p]
        write_sorted_run(self._prov_path(p),
                         [KvRecord(k, _pack_outputs(prov[k])) for k in sorted(prov)], KIND_KV)
        write_sorted_run(self.result_path(p), self.records(p), KIND_KV,
                         sort_key=lambda r: (r.key, r.value))

    def records(self, p):
        return sorted(KvRecord(*o) for outs in self.prov[p].values() for o in outs)

    def all_records(self):
        return sorted(r for p in range(self.n) for r in self.records(p))

    def as_dict(self):
        return {r.key: r.value for r in self.all_records()}

    def patch(self, p, changes):
        """Replace the outputs of each K2 in ``changes``; ``None`` retracts."""
        if not changes:
            return
        prov = self.prov[p]
        for k2, outs in changes.items():
            if outs is None:
                prov.pop(k2, None)
            else:
                prov[k2] = [KvRecord(k, v) for k, v in outs]
        self._write(p)

    def paths(self):
        return [self.result_path(p) for p in range(self.n)]


@dataclass
class Accumulator:
    """Distributive fold used by accumulator reducers."""

    accumulate: Callable[[bytes, bytes], bytes]
    identity: bytes

    def fold(self, values, start=None):
        acc = self.identity if start is None else start
        for v in values:
            acc = self.accumulate(acc, v)
        return acc

    def as_reducer(self):
        def reduce_fn(k2, values):
            return [(k2, self.fold(values))]
        return reduce_fn


@dataclass
class IncrementalResult:
    results: ResultStore
    map_calls: int = 0
    reduce_calls: int = 0
    retractions: int = 0
    affected: set = field(default_factory=set)
    store_counters: Dict[str, int] = field(default_factory=dict)

    @property
    def reinvocations(self):
        """Affected reduce instances: re-reduced groups plus retracted ones."""
        return self.reduce_calls + self.retractions


def _store(spec, workdir, p):
    return MRBGStore(os.path.join(workdir, f"part-{p:05d}"), spec.gap_threshold,
                     spec.read_cache_size, spec.append_buffer_size, spec.window_policy)


def _read_job(workdir):
    path = os.path.join(workdir, JOB_FILE)
    if not os.path.exists(path):
        raise StateError(f"no preserved job state in {workdir}")
    with open(path) as f:
        return json.load(f)


def _write_job(workdir, info):
    tmp = os.path.join(workdir, JOB_FILE + ".tmp")
    with open(tmp, "w") as f:
        json.dump(info, f, sort_keys=True, indent=1)
    os.replace(tmp, os.path.join(workdir, JOB_FILE))


def run_initial(spec: JobSpec, inputs, map_fn, reduce_fn, workdir, metrics=None, pool=None):
    """Full run that preserves the MRBGraph and the reduce outputs."""
    metrics = metrics or Metrics()
    own_pool = pool is None
    pool = pool or WorkerPool(spec.workers)
    part = Partitioner(spec.num_partitions)
    if os.path.exists(workdir):
        shutil.rmtree(workdir)
    os.makedirs(workdir)
    preserve = spec.mrbg_enabled
    try:
        splits = [as_input_records(s, i) for i, s in enumerate(inputs)]
        with metrics.stage("map", tasks=len(splits)):
            map_outs = pool.run([
                (lambda i=i, s=s: map_task(f"m{i}", ((r.mk, (r.key, r.value)) for r in s),
                                           map_fn, part, spec.sort_budget, unique_k2=preserve))
                for i, s in enumerate(splits)])

        def reduce_task(p):
            store = _store(spec, workdir, p) if preserve else None
            if store is not None:
                store._start_append()
            prov = {}
            calls = 0
            for k2, edges in group_by_key(shuffle_sort(map_outs, p)):
                if store is not None:
                    store.append_chunk(k2, edges)
                try:
                    prov[k2] = list(reduce_fn(k2, [e.v2 for e in edges]))
                except Exception as e:
                    raise TaskError(f"r{p}", k2, e) from e
                calls += 1
            if store is not None:
                store.flush()
                store.close()
            return prov, calls

        with metrics.stage("reduce", tasks=spec.num_partitions):
            res = pool.run([lambda p=p: reduce_task(p) for p in range(spec.num_partitions)])
    finally:
        if own_pool:
            pool.close()
    results = ResultStore.create(os.path.join(workdir, "results"), [r[0] for r in res])
    _write_job(workdir, {"num_partitions": spec.num_partitions, "mrbg": preserve,
                         "reducer": spec.reducer.value})
    metrics.emit("job", mode="initial", records_in=sum(len(s) for s in splits),
                 reduce_calls=sum(r[1] for r in res),
                 bytes_shuffled=sum(m.bytes for m in map_outs))
    return IncrementalResult(results, map_calls=sum(len(s) for s in splits),
                             reduce_calls=sum(r[1] for r in res))


def _delta_records(delta):
    """Flatten delta splits (lists of DeltaRecord or run-file paths)."""
    out = []
    for split in delta:
        if isinstance(split, DeltaRecord):
            out.append(split)
        elif isinstance(split, (str, os.PathLike)):
            out.extend(open_sorted_run(split))
        else:
            out.extend(split)
    return out


def _delta_splits(delta):
    if all(isinstance(s, DeltaRecord) for s in delta):
        return [list(delta)] if delta else []
    return [_delta_records([s]) for s in delta]


def _check_state(spec, workdir, need_mrbg):
    info = _read_job(workdir)
    if info["num_partitions"] != spec.num_partitions:
        raise StateError(f"preserved state has {info['num_partitions']} partitions, job asks for {spec.num_partitions}")
    if need_mrbg:
        if not info.get("mrbg"):
            raise StateError("preserved state carries no MRBGraph")
        for p in range(spec.num_partitions):
            d = os.path.join(workdir, f"part-{p:05d}")
            if not os.path.exists(os.path.join(d, "mrbg.dat")):
                raise StateError(f"preserved MRBGraph missing for partition {p}")
    return info


def run_incremental(spec: JobSpec, delta, map_fn, reduce_fn, workdir, metrics=None, pool=None):
    """Refresh preserved results with a signed delta of map inputs."""
    metrics = metrics or Metrics()
    _check_state(spec, workdir, need_mrbg=True)
    results = ResultStore(os.path.join(workdir, "results"), spec.num_partitions)
    splits = _delta_splits(delta)
    if not any(splits):
        metrics.emit("job", mode="incr", map_calls=0, reduce_calls=0)
        return IncrementalResult(results)
    part = Partitioner(spec.num_partitions)
    own_pool = pool is None
    pool = pool or WorkerPool(spec.workers)
    sign = lambda mk, args: args[2] == INSERT  # noqa: E731
    try:
        with metrics.stage("delta-map", tasks=len(splits)):
            map_outs = pool.run([
                (lambda i=i, s=s: map_task(
                    f"dm{i}", ((d.mk, (d.record.key, d.record.value, d.sign)) for d in s),
                    lambda k, v, _s: map_fn(k, v), part, spec.sort_budget, sign_of=sign, unique_k2=True))
                for i, s in enumerate(splits)])

        def reduce_task(p):
            store = _store(spec, workdir, p)
            changes = {}
            calls = retracted = 0
            try:
                for k2, merged in store.merge_delta(shuffle_sort(map_outs, p)):
                    if merged:
                        try:
                            changes[k2] = list(reduce_fn(k2, [e.v2 for e in merged]))
                        except Exception as e:
                            raise TaskError(f"r{p}", k2, e) from e
                        calls += 1
                    else:
                        changes[k2] = None
                        retracted += 1
                counters = store.counters()
            finally:
                store.close()
            results.patch(p, changes)
            return calls, retracted, set(changes), counters

        with metrics.stage("delta-reduce", tasks=spec.num_partitions):
            res = pool.run([lambda p=p: reduce_task(p) for p in range(spec.num_partitions)])
    finally:
        if own_pool:
            pool.close()
    out = IncrementalResult(results, map_calls=sum(len(s) for s in splits))
    for calls, retracted, keys, counters in res:
        out.reduce_calls += calls
        out.retractions += retracted
        out.affected |= keys
        for k, v in counters.items():
            out.store_counters[k] = out.store_counters.get(k, 0) + v
    metrics.emit("job", mode="incr", map_calls=out.map_calls, reduce_calls=out.reduce_calls,
                 retractions=out.retractions, bytes_shuffled=sum(m.bytes for m in map_outs),
                 **{f"store_{k}": v for k, v in out.store_counters.items()})
    return out


def run_incremental_accumulator(spec: JobSpec, delta, map_fn, accumulator: Accumulator, workdir,
                                metrics=None, pool=None):
    """Fold an insert-only delta into the preserved results; no MRBGraph used."""
    if spec.reducer is not ReducerKind.ACCUMULATOR:
        raise ContractViolation("accumulator path needs an ACCUMULATOR reducer")
    metrics = metrics or Metrics()
    info = _check_state(spec, workdir, need_mrbg=False)
    records = _delta_records(delta)
    for d in records:
        if d.sign != INSERT:
            raise ContractViolation(f"accumulator delta may only insert; got delete of {d.record.key!r}")
    results = ResultStore(os.path.join(workdir, "results"), spec.num_partitions)
    if not records:
        return IncrementalResult(results)
    splits = _delta_splits(delta)
    part = Partitioner(spec.num_partitions)
    own_pool = pool is None
    pool = pool or WorkerPool(spec.workers)
    try:
        map_outs = pool.run([
            (lambda i=i, s=s: map_task(f"am{i}", ((d.mk, (d.record.key, d.record.value)) for d in s),
                                       map_fn, part, spec.sort_budget))
            for i, s in enumerate(splits)])

        def reduce_task(p):
            changes = {}
            for k2, edges in group_by_key(shuffle_sort(map_outs, p)):
                folded = accumulator.fold(e.v2 for e in edges)
                prior = results.prov[p].get(k2)
                if prior:
                    if len(prior) != 1 or prior[0].key != k2:
                        raise ContractViolation(f"accumulator result for {k2!r} is not a single (K2, V) pair")
                    base = prior[0].value
                else:
                    base = accumulator.identity
                changes[k2] = [(k2, accumulator.accumulate(base, folded))]
            results.patch(p, changes)
            return len(changes)

        calls = sum(pool.run([lambda p=p: reduce_task(p) for p in range(spec.num_partitions)]))
    finally:
        if own_pool:
            pool.close()
    if info.get("mrbg"):
        # The preserved MRBGraph no longer matches the refreshed results.
        info["mrbg"] = False
        _write_job(workdir, info)
    metrics.emit("job", mode="incr-accumulate", map_calls=len(records), reduce_calls=calls)
    return IncrementalResult(results, map_calls=len(records), reduce_calls=calls)


def apply_delta(base: List[InputRecord], delta) -> List[InputRecord]:
    """Apply a delta to identified input records; used to build oracle inputs."""
    current = {r.mk: r for r in base}
    for d in _delta_records(delta):
        if d.sign == DELETE:
            old = current.get(d.mk)
            if old is not None and old.key == d.record.key and old.value == d.record.value:
                del current[d.mk]
        else:
            current[d.mk] = InputRecord(d.record.key, d.mk, d.record.value)
    return sorted(current.values(), key=lambda r: r.mk)
