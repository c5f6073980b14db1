"""Plain one-step MapReduce over an in-process worker pool.

The phases are exposed separately (:func:`map_task`, :func:`shuffle_sort`,
:func:`reduce_partition`) because the incremental and iterative runtimes
reuse them; :func:`run_job` composes them into the baseline job that also
serves as the recompute oracle.
"""

import enum
import heapq
import itertools
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from operator import attrgetter
from typing import Callable, Iterable, List, Optional

from .metrics import Metrics
from .records import (
    KIND_EDGE,
    InputRecord,
    KvRecord,
    MapKey,
    MRBGEdge,
    edge_order,
    open_sorted_run,
    write_sorted_run,
)

log = logging.getLogger(__name__)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


class Mode(enum.Enum):
    PLAIN = "plain"
    INCR_ONESTEP = "incr"
    ITERATIVE = "iter"
    INCR_ITERATIVE = "incr-iter"


class ReducerKind(enum.Enum):
    GENERAL = "general"
    ACCUMULATOR = "accumulator"


class JobError(Exception):
    pass


class TaskError(JobError):
    """A user callback failed inside a task."""

    def __init__(self, task_id, key, cause):
        super().__init__(f"task {task_id} failed on key {key!r}: {cause!r}")
        self.task_id = task_id
        self.key = key
        self.cause = cause


@dataclass
class JobSpec:
    mode: Mode = Mode.PLAIN
    num_partitions: int = 1
    reducer: ReducerKind = ReducerKind.GENERAL
    mrbg_enabled: bool = True
    auto_off_threshold: float = 0.5
    # None leaves change propagation control off.
    filter_threshold: Optional[float] = None
    gap_threshold: int = 102400
    read_cache_size: int = 1 << 20
    append_buffer_size: int = 4 << 20
    window_policy: str = "multi-dynamic"
    max_iterations: int = 50
    tolerance: float = 1e-6
    divergence_patience: int = 0
    workers: int = 1
    nodes: int = 4
    sort_budget: int = 64 << 20
    # 0 turns checkpointing off.
    checkpoint_every: int = 1

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = Mode(self.mode)
        if isinstance(self.reducer, str):
            self.reducer = ReducerKind(self.reducer)
        if self.num_partitions < 1:
            raise ValueError("num_partitions must be >= 1")
        if not 0 < self.auto_off_threshold <= 1:
            raise ValueError("auto_off_threshold must lie in (0, 1]")
        if self.filter_threshold is not None and self.filter_threshold < 0:
            raise ValueError("filter_threshold must be non-negative")
        if self.gap_threshold >= self.read_cache_size:
            raise ValueError("gap threshold must be smaller than the read cache")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.workers < 1 or self.nodes < 1:
            raise ValueError("workers and nodes must be >= 1")


class Partitioner:
    def __init__(self, n):
        if n < 1:
            raise ValueError("partition count must be >= 1")
        self.n = n
        self._memo = {}

    def __call__(self, key: bytes) -> int:
        p = self._memo.get(key)
        if p is None:
            p = fnv1a_64(key) % self.n
            if len(self._memo) < 1_000_000:
                self._memo[key] = p
        return p

    partition_of = __call__


class WorkerPool:
    """Fixed-size pool; results always come back in submission order."""

    def __init__(self, size=1):
        self.size = size
        self._ex = ThreadPoolExecutor(max_workers=size) if size > 1 else None

    def run(self, tasks):
        """Run ``tasks`` (zero-argument callables) and return their results.

        The first failing task in submission order is re-raised after every
        task has settled, so a failure never leaves stray tasks running.
        """
        if self._ex is None:
            return [t() for t in tasks]
        futures = [self._ex.submit(t) for t in tasks]
        results, first_err = [], None
        for f in futures:
            try:
                results.append(f.result())
            except BaseException as e:  # noqa: B902 - re-raised below
                results.append(None)
                if first_err is None:
                    first_err = e
        if first_err is not None:
            raise first_err
        return results

    def close(self):
        if self._ex is not None:
            self._ex.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def as_input_records(split, index) -> List[InputRecord]:
    """Normalize one input split to InputRecords.

    Plain KvRecords get MapKey(index, position); InputRecords keep theirs.
    A string is treated as the path of a run file.
    """
    if isinstance(split, (str, os.PathLike)):
        split = open_sorted_run(split)
    out = []
    for pos, r in enumerate(split):
        if isinstance(r, InputRecord):
            out.append(r)
        else:
            key, value = r
            out.append(InputRecord(key, MapKey(index, pos), value))
    return out


class MapOutput:
    """Per-partition sorted runs produced by one map task.

    Runs are in-memory lists until the task's buffered size passes the sort
    budget, after which sorted runs spill to EDGE run files.
    """

    def __init__(self, n, budget, spill_dir=None):
        self.n = n
        self.budget = budget
        self.spill_dir = spill_dir
        self.runs = [[] for _ in range(n)]
        self._buf = [[] for _ in range(n)]
        self._bytes = 0
        self.records = 0
        self.bytes = 0

    def add(self, p, edge):
        self._buf[p].append(edge)
        size = len(edge.k2) + (len(edge.v2) if edge.v2 is not None else 0) + 17
        self._bytes += size
        self.bytes += size
        self.records += 1
        if self._bytes > self.budget:
            self._spill()

    def _spill(self):
        if self.spill_dir is None:
            self.spill_dir = tempfile.mkdtemp(prefix="imr-spill-")
        os.makedirs(self.spill_dir, exist_ok=True)
        for p, buf in enumerate(self._buf):
            if buf:
                buf.sort(key=edge_order)
                fd, path = tempfile.mkstemp(dir=self.spill_dir, suffix=f".p{p}.run")
                os.close(fd)
                write_sorted_run(path, buf, KIND_EDGE)
                self.runs[p].append(path)
        self._buf = [[] for _ in range(self.n)]
        self._bytes = 0

    def finish(self):
        for p, buf in enumerate(self._buf):
            if buf:
                buf.sort(key=edge_order)
                self.runs[p].append(buf)
        self._buf = [[] for _ in range(self.n)]
        return self

    @property
    def spilled(self):
        return any(isinstance(r, str) for runs in self.runs for r in runs)


def map_task(task_id, records, map_fn, partitioner, budget=64 << 20, spill_dir=None, sign_of=None,
             unique_k2=False):
    """Apply ``map_fn`` to each record, partitioning the emitted edges.

    ``records`` yields ``(mk, args)`` pairs; ``map_fn(*args)`` returns an
    iterable of ``(k2, v2)``.  If ``sign_of`` is given it maps a record to
    True (emit values) or False (emit tombstones).  With ``unique_k2`` a map
    call may emit each K2 at most once, since (K2, MapKey) must identify a
    preserved edge.
    """
    out = MapOutput(partitioner.n, budget, spill_dir)
    for mk, args in records:
        keep = True if sign_of is None else sign_of(mk, args)
        try:
            emitted = list(map_fn(*args))
        except Exception as e:
            raise TaskError(task_id, args[0], e) from e
        if unique_k2 and len({k for k, _ in emitted}) != len(emitted):
            raise TaskError(task_id, args[0], ValueError("map emitted the same K2 twice for one record"))
        for k2, v2 in emitted:
            out.add(partitioner(k2), MRBGEdge(k2, mk, v2 if keep else None))
    return out.finish()


def _run_stream(run):
    if isinstance(run, str):
        return iter(open_sorted_run(run))
    return iter(run)


def shuffle_sort(map_outputs: Iterable[MapOutput], partition: int):
    """Merge every map task's sorted run for ``partition`` by (K2, MapKey)."""
    streams = [_run_stream(r) for mo in map_outputs for r in mo.runs[partition]]
    if len(streams) == 1:
        return streams[0]
    return heapq.merge(*streams, key=edge_order)


def group_by_key(edges):
    """Group a (K2, MK)-sorted edge stream into ``(k2, [edges])``."""
    for k2, grp in itertools.groupby(edges, key=attrgetter("k2")):
        yield k2, list(grp)


def sort_outputs(outputs):
    return sorted(outputs)


def reduce_partition(task_id, groups, reduce_fn, on_group=None):
    """Run ``reduce_fn`` over ``(k2, edges)`` groups; return (outputs, calls)."""
    outputs = []
    calls = 0
    for k2, edges in groups:
        if on_group is not None:
            on_group(k2, edges)
        values = [e.v2 for e in edges]
        try:
            res = list(reduce_fn(k2, values))
        except Exception as e:
            raise TaskError(task_id, k2, e) from e
        calls += 1
        outputs.extend(KvRecord(k, v) for k, v in res)
    return outputs, calls


@dataclass
class JobResult:
    outputs: List[List[KvRecord]]
    reduce_calls: int = 0
    records_in: int = 0
    shuffled_records: int = 0
    shuffled_bytes: int = 0
    paths: List[str] = field(default_factory=list)

    def as_dict(self):
        return {r.key: r.value for part in self.outputs for r in part}

    def records(self):
        return sorted(r for part in self.outputs for r in part)


def write_outputs(out_dir, outputs):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for p, recs in enumerate(outputs):
        path = os.path.join(out_dir, f"part-{p:05d}.run")
        write_sorted_run(path, recs, sort_key=lambda r: (r.key, r.value))
        paths.append(path)
    return paths


def run_job(spec: JobSpec, inputs, map_fn: Callable, reduce_fn: Callable, out_dir=None,
            metrics: Optional[Metrics] = None, pool: Optional[WorkerPool] = None,
            on_group=None) -> JobResult:
    """Run a plain MapReduce job.

    ``inputs`` is a list of splits (one map task each).  Output partition p
    holds the sorted reduce outputs of every K2 with ``partition_of(K2) == p``.
    ``on_group(partition, k2, edges)`` observes each reduce group; the
    incremental runtime uses it to preserve the MRBGraph.
    """
    if spec.mode not in (Mode.PLAIN, Mode.INCR_ONESTEP):
        raise JobError(f"run_job cannot execute mode {spec.mode}")
    metrics = metrics or Metrics()
    own_pool = pool is None
    pool = pool or WorkerPool(spec.workers)
    part = Partitioner(spec.num_partitions)
    try:
        splits = [as_input_records(s, i) for i, s in enumerate(inputs)]
        with metrics.stage("map", tasks=len(splits)):
            map_outs = pool.run([
                (lambda i=i, s=s: map_task(
                    f"m{i}", ((r.mk, (r.key, r.value)) for r in s), map_fn, part, spec.sort_budget))
                for i, s in enumerate(splits)
            ])
        shuffled = sum(mo.records for mo in map_outs)
        shuffled_bytes = sum(mo.bytes for mo in map_outs)

        def reduce_task(p):
            hook = None if on_group is None else (lambda k2, edges: on_group(p, k2, edges))
            outs, calls = reduce_partition(f"r{p}", group_by_key(shuffle_sort(map_outs, p)), reduce_fn, hook)
            return sort_outputs(outs), calls

        with metrics.stage("reduce", tasks=spec.num_partitions):
            results = pool.run([lambda p=p: reduce_task(p) for p in range(spec.num_partitions)])
    finally:
        if own_pool:
            pool.close()
    outputs = [r[0] for r in results]
    res = JobResult(
        outputs=outputs,
        reduce_calls=sum(r[1] for r in results),
        records_in=sum(len(s) for s in splits),
        shuffled_records=shuffled,
        shuffled_bytes=shuffled_bytes,
    )
    if out_dir is not None:
        res.paths = write_outputs(out_dir, outputs)
    metrics.emit("job", mode=spec.mode.value, records_in=res.records_in,
                 records_out=sum(len(o) for o in outputs), bytes_shuffled=shuffled_bytes,
                 reduce_calls=res.reduce_calls)
    return res
