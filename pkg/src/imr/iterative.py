"""Iterative processing over structure and state data.

Structure records ``(SK, SV)`` are loop invariant; state records ``(DK, DV)``
change every iteration.  ``project(SK)`` names the one state key a structure
record depends on, so partitioning structure by ``hash(project(SK))`` and
state by ``hash(DK)`` puts both sides of every join in the same partition.
The prime Map then joins the two sorted files in one pass, and the prime
Reduce for partition ``p`` produces exactly partition ``p``'s next state, so
no state moves between workers.  Apps whose state is a handful of keys run
in replicated mode instead: structure is spread by ``hash(SK)`` and every
partition receives a full copy of the state.

:class:`IterativeRuntime` drives both the plain iterative loop and the
incremental one (MRBGraph merge, change propagation control, automatic
MRBGraph shut-off), along with checkpointing and failure recovery.
"""

import enum
import logging
import os
import shutil
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from .engine import (
    JobError,
    JobSpec,
    Mode,
    Partitioner,
    TaskError,
    WorkerPool,
    as_input_records,
    group_by_key,
    map_task,
    shuffle_sort,
)
from .faults import (
    CheckpointManager,
    FailureInjector,
    InjectedFailure,
    NoHealthyWorker,
    TaskKind,
)
from .incr_iter import ConvergedSnapshot, CpcState, p_delta
from .metrics import Metrics
from .mrbg import MRBGStore
from .records import (
    DELETE,
    INSERT,
    KIND_INPUT,
    KIND_KV,
    DeltaRecord,
    InputRecord,
    KvRecord,
    encode_record,
    open_sorted_run,
    write_sorted_run,
)

log = logging.getLogger(__name__)

GLOBAL = -1
MAX_ATTEMPTS = 4


class Dependency(enum.Enum):
    ONE2ONE = "one2one"
    MANY2ONE = "many2one"
    ONE2MANY = "one2many"
    MANY2MANY = "many2many"


class DivergenceError(JobError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class IterativeApp:
    """Callback bundle for an iterative algorithm.

    ``map(sk, sv, dk, dv)`` returns ``(k2, v2)`` pairs; ``reduce(k2, values)``
    returns the new ``(dk, dv)``.  ``distance`` feeds the convergence metric
    and, unless ``difference`` is given, change propagation control.  In
    replicated mode ``collect(prior_state, outputs)`` folds the reduce
    outputs into the next full state.
    """

    name: str
    project: Callable[[bytes], bytes]
    map: Callable
    reduce: Callable
    init: Callable[[bytes], bytes]
    distance: Callable[[bytes, bytes], float]
    dependency: Dependency = Dependency.ONE2ONE
    replicated: bool = False
    collect: Optional[Callable] = None
    difference: Optional[Callable[[bytes, bytes], float]] = None

    def validate(self):
        if self.dependency in (Dependency.ONE2MANY, Dependency.MANY2MANY):
            raise JobError(
                f"{self.name}: {self.dependency.name} dependencies are not supported; redefine the "
                "state key so each structure key depends on a single state key (for example, "
                "key the state by the structure key it feeds)")
        if self.replicated and self.collect is None:
            raise JobError(f"{self.name}: replicated state needs a collect callback")

    @property
    def diff(self):
        return self.difference or self.distance


def _project(app, sk):
    try:
        dk = app.project(sk)
    except Exception as e:
        raise JobError(f"project failed on structure key {sk!r}: {e!r}") from e
    if not isinstance(dk, bytes):
        raise JobError(f"project returned {type(dk).__name__} for structure key {sk!r}")
    return dk


def partition_data(app, structure, state, n):
    """Split structure and state into ``n`` co-partitioned, sorted slices.

    Returns ``(structure_parts, state_parts)``: each structure slice is a list
    of ``(dk, record)`` sorted by ``(dk, sk, mk)``; each state slice a sorted
    list of ``(dk, dv)``.  In replicated mode every slice gets the full state.
    """
    app.validate()
    part = Partitioner(n)
    sparts = [[] for _ in range(n)]
    for rec in structure:
        dk = _project(app, rec.key)
        p = part(rec.key if app.replicated else dk)
        sparts[p].append((dk, rec))
    for s in sparts:
        s.sort(key=lambda x: (x[0], x[1].key, x[1].mk))
    state = sorted(state.items() if isinstance(state, dict) else state)
    if app.replicated:
        dparts = replicate_small_state(state, n)[0]
    else:
        dparts = [[] for _ in range(n)]
        for dk, dv in state:
            dparts[part(dk)].append((dk, dv))
    return sparts, dparts


def replicate_small_state(state, n):
    """Give every partition a full copy of ``state``; return (copies, bytes moved)."""
    items = sorted(state.items() if isinstance(state, dict) else state)
    size = sum(len(encode_record(KvRecord(k, v))) for k, v in items)
    return [list(items) for _ in range(n)], n * size


def prime_map(structure, state_items, init):
    """Merge-join a structure slice with its sorted state slice.

    Yields ``(mk, (sk, sv, dk, dv))`` once per structure record; a record
    whose state key has no state gets ``init(dk)``.
    """
    it = iter(state_items)
    cur = next(it, None)
    for dk, rec in structure:
        while cur is not None and cur[0] < dk:
            cur = next(it, None)
        dv = cur[1] if cur is not None and cur[0] == dk else init(dk)
        yield rec.mk, (rec.key, rec.value, dk, dv)


# -- on-disk helpers ------------------------------------------------------

_PENDING = struct.Struct(">BI")


def _write_state(path, state):
    write_sorted_run(path, [KvRecord(k, state[k]) for k in sorted(state)], KIND_KV)


def _read_state(path):
    if not os.path.exists(path):
        return {}
    return {r.key: r.value for r in open_sorted_run(path)}


def _write_pending(path, pending):
    recs = []
    for k in sorted(pending):
        old, new = pending[k]
        flags = (old is not None) | ((new is not None) << 1)
        old, new = old or b"", new or b""
        recs.append(KvRecord(k, _PENDING.pack(flags, len(old)) + old + new))
    write_sorted_run(path, recs, KIND_KV)


def _read_pending(path):
    out = {}
    if not os.path.exists(path):
        return out
    for r in open_sorted_run(path):
        flags, n = _PENDING.unpack_from(r.value)
        old = r.value[_PENDING.size:_PENDING.size + n]
        new = r.value[_PENDING.size + n:]
        out[r.key] = (old if flags & 1 else None, new if flags & 2 else None)
    return out


def _write_acc(path, acc):
    write_sorted_run(path, [KvRecord(k, repr(acc[k]).encode()) for k in sorted(acc)], KIND_KV)


def _read_acc(path):
    return {k: float(v) for k, v in _read_state(path).items()}


@dataclass
class IterativeResult:
    state: Dict[bytes, bytes]
    visible: Dict[bytes, bytes]
    trace: List[dict]
    iterations: int
    converged: bool
    mrbg_valid: bool
    workdir: str
    result_paths: List[str] = field(default_factory=list)
    backward_bytes: int = 0
    recoveries: List[tuple] = field(default_factory=list)
    placement: Dict[int, tuple] = field(default_factory=dict)

    def records(self):
        return [KvRecord(k, self.state[k]) for k in sorted(self.state)]


class _Failed:
    def __init__(self, exc):
        self.exc = exc


class _Rollback(Exception):
    def __init__(self, ckpt):
        super().__init__(f"rolling back to checkpoint {ckpt.iteration}")
        self.ckpt = ckpt


class IterativeRuntime:
    """Resident iterative job over ``workdir``.

    Layout::

        structure/part-NNNNN.run   structure slices (durable input)
        part-NNNNN/                local files of partition p: state.run,
                                   computed.run, cpc.run, delta.run, mrbg.*
        global/                    replicated state (replicated mode only)
        ckpt/<iter>/<p>/           checkpoints
        results/part-NNNNN.run     final state
        snapshot.json
    """

    def __init__(self, app: IterativeApp, spec: JobSpec, workdir, metrics=None, pool=None,
                 injector=None):
        app.validate()
        self.app = app
        self.spec = spec
        self.n = spec.num_partitions
        self.part = Partitioner(self.n)
        self.workdir = str(workdir)
        self.metrics = metrics or Metrics()
        self._own_pool = pool is None
        self.pool = pool or WorkerPool(spec.workers)
        self.injector = injector or FailureInjector()
        from .faults import Scheduler

        self.sched = Scheduler(self.n, spec.nodes)
        self.ckpts = None
        self.recoveries = []
        self.backward_bytes = 0
        self.trace = []
        self.stores: List[Optional[MRBGStore]] = [None] * self.n
        self.mrbg_active = False
        self.disabled = False
        self.delta_struct = None
        self._by_dk = [None] * self.n
        self.cpc_on = spec.mode is Mode.INCR_ITERATIVE and spec.filter_threshold is not None
        self._reset_state()

    # -- state containers ---------------------------------------------------

    def _reset_state(self):
        ns = 1 if self.app.replicated else self.n
        self.visible = [dict() for _ in range(ns)]
        self.computed = [dict() for _ in range(ns)]
        self.acc = [dict() for _ in range(ns)]
        self.pending = [dict() for _ in range(ns)]

    def _sp(self, p):
        """State slot read by partition ``p``."""
        return 0 if self.app.replicated else p

    def _pdir(self, p):
        return os.path.join(self.workdir, "global" if p == GLOBAL else f"part-{p:05d}")

    def _struct_path(self, p):
        return os.path.join(self.workdir, "structure", f"part-{p:05d}.run")

    def _state_dirs(self):
        return [GLOBAL] if self.app.replicated else list(range(self.n))

    def _slot_of_dir(self, d):
        return 0 if d == GLOBAL else d

    def close(self):
        for s in self.stores:
            if s is not None:
                s.close()
        if self._own_pool:
            self.pool.close()

    # -- persistence --------------------------------------------------------

    def _write_structure(self):
        os.makedirs(os.path.join(self.workdir, "structure"), exist_ok=True)
        for p in range(self.n):
            write_sorted_run(self._struct_path(p), [rec for _, rec in self.structure[p]], KIND_INPUT,
                             sort_key=lambda r: (_project(self.app, r.key), r.key, r.mk))

    def _load_structure(self, p):
        return sorted(((_project(self.app, r.key), r) for r in open_sorted_run(self._struct_path(p))),
                      key=lambda x: (x[0], x[1].key, x[1].mk))

    def _persist_slot(self, d):
        s = self._slot_of_dir(d)
        pd = self._pdir(d)
        os.makedirs(pd, exist_ok=True)
        _write_state(os.path.join(pd, "state.run"), self.visible[s])
        _write_state(os.path.join(pd, "computed.run"), self.computed[s])
        _write_acc(os.path.join(pd, "cpc.run"), self.acc[s])
        _write_pending(os.path.join(pd, "delta.run"), self.pending[s])

    def _load_slot(self, d):
        s = self._slot_of_dir(d)
        pd = self._pdir(d)
        self.visible[s] = _read_state(os.path.join(pd, "state.run"))
        self.computed[s] = _read_state(os.path.join(pd, "computed.run"))
        self.acc[s] = _read_acc(os.path.join(pd, "cpc.run"))
        self.pending[s] = _read_pending(os.path.join(pd, "delta.run"))

    def _replicate(self):
        """Write the replicated state into every partition; count the bytes moved."""
        if not self.app.replicated:
            return 0
        src = os.path.join(self._pdir(GLOBAL), "state.run")
        moved = 0
        for p in range(self.n):
            dst = os.path.join(self._pdir(p), "state.run")
            os.makedirs(self._pdir(p), exist_ok=True)
            shutil.copyfile(src, dst)
            moved += os.path.getsize(dst)
        return moved

    def _persist(self):
        for d in self._state_dirs():
            self._persist_slot(d)

    def _open_store(self, p):
        if self.stores[p] is not None:
            self.stores[p].close()
        s = self.spec
        self.stores[p] = MRBGStore(self._pdir(p), s.gap_threshold, s.read_cache_size,
                                   s.append_buffer_size, s.window_policy)
        return self.stores[p]

    def _partition_files(self, p):
        pd = self._pdir(p)
        names = ["state.run", "computed.run", "cpc.run", "delta.run"] if (p == GLOBAL or not self.app.replicated) \
            else ["state.run"]
        if p != GLOBAL:
            names += ["mrbg.dat", "mrbg.idx"]
        return [os.path.join(pd, x) for x in names]

    def _checkpoint(self, t):
        if self.ckpts is None or (t > 0 and t % self.spec.checkpoint_every):
            return 0.0, 0
        t0 = time.perf_counter()
        self._persist()
        files = {p: self._partition_files(p) for p in range(self.n)}
        if self.app.replicated:
            files[GLOBAL] = self._partition_files(GLOBAL)
        meta = {"mrbg_active": self.mrbg_active, "disabled": self.disabled, "trace": self.trace}
        size = self.ckpts.write(t, files, meta)
        return time.perf_counter() - t0, size

    def _restore_partition(self, ckpt, p, wipe=False):
        """Bring partition ``p``'s local files and memory back to ``ckpt``."""
        pd = self._pdir(p)
        if p != GLOBAL and self.stores[p] is not None:
            self.stores[p].close()
            self.stores[p] = None
        if wipe and os.path.isdir(pd):
            shutil.rmtree(pd)
        else:
            for path in self._partition_files(p):
                if os.path.exists(path):
                    os.remove(path)
        self.ckpts.restore(ckpt, p, pd)
        if p == GLOBAL or not self.app.replicated:
            self._load_slot(p)
        if p != GLOBAL and self.mrbg_active:
            self._open_store(p)

    def _note_recovery(self, event):
        kind, t, who = event
        self.recoveries.append(event)
        self.metrics.emit("recovery", kind=kind, iteration=t, target=who,
                          colocated=self.sched.colocated(), placement=self.sched.table())

    def _global_rollback(self, ckpt):
        log.warning("global rollback to checkpoint %d", ckpt.iteration)
        self._note_recovery(("rollback", ckpt.iteration, None))
        self.mrbg_active = ckpt.meta["mrbg_active"]
        self.disabled = ckpt.meta["disabled"]
        self.trace = list(ckpt.meta["trace"])
        for p in range(self.n):
            self._restore_partition(ckpt, p)
        if self.app.replicated:
            self._restore_partition(ckpt, GLOBAL)
        self.ckpts.prune_after(ckpt.iteration)
        return ckpt.iteration

    def _checkpoint_for(self, t):
        """Checkpoint of iteration ``t - 1``, or a rollback to an older one."""
        if self.ckpts is None:
            raise JobError("task failed and checkpointing is off; cannot recover")
        ck = self.ckpts.latest_valid(upto=t - 1)
        if ck is None:
            raise JobError("no valid checkpoint to recover from")
        if ck.iteration != t - 1:
            raise _Rollback(ck)
        return ck

    # -- task plumbing ------------------------------------------------------

    def _run_tasks(self, tasks):
        def guard(task):
            def run():
                try:
                    return task()
                except InjectedFailure as e:
                    return _Failed(e)
            return run
        return self.pool.run([guard(t) for t in tasks])

    def _inject(self, kind, t, p, items, before_fire=None):
        idx = self.injector.trigger_index(kind, t, p, len(items))
        if idx is None:
            return items

        def gen():
            for i, x in enumerate(items):
                if i == idx:
                    if before_fire:
                        before_fire()
                    self.injector.fire(kind, t, p)
                yield x
            if before_fire:
                before_fire()
            self.injector.fire(kind, t, p)
        return gen()

    def _eff(self, dv, dk):
        return dv if dv is not None else self.app.init(dk)

    def _by_dk_index(self, p):
        """Partition ``p``'s structure records grouped by state key.

        Built per partition so concurrent map tasks never share a cache entry.
        """
        idx = self._by_dk[p]
        if idx is None:
            idx = {}
            for dk, rec in self.structure[p]:
                idx.setdefault(dk, []).append(rec)
            self._by_dk[p] = idx
        return idx

    # -- map ----------------------------------------------------------------

    def _map_items(self, t, p):
        """``(mk, args)`` items for partition ``p``'s prime Map, with a sign flag."""
        s = self._sp(p)
        if not self.mrbg_active:
            state = sorted(self.visible[s].items())
            return [(mk, args + (True,)) for mk, args in prime_map(self.structure[p], state, self.app.init)]
        vis = self.visible[s]
        items = []
        if t == self._first and self.delta_struct is not None:
            for dk, d in self.delta_struct[p]:
                dv = self._eff(vis.get(dk), dk)
                items.append((d.mk, (d.record.key, d.record.value, dk, dv, d.sign == INSERT)))
            return items
        by_dk = self._by_dk_index(p)
        pending = self.pending[s]
        for dk in sorted(pending):
            recs = by_dk.get(dk)
            if not recs:
                continue
            old, new = pending[dk]
            old, new = self._eff(old, dk), self._eff(new, dk)
            if old == new:
                continue
            for rec in recs:
                items.append((rec.mk, (rec.key, rec.value, dk, old, False)))
                items.append((rec.mk, (rec.key, rec.value, dk, new, True)))
        return items

    def _map_task(self, t, p):
        items = self._inject(TaskKind.PRIME_MAP, t, p, self._map_items(t, p))
        fn = self.app.map
        return map_task(f"pm{t}.{p}", items, lambda sk, sv, dk, dv, _s: fn(sk, sv, dk, dv), self.part,
                        self.spec.sort_budget, sign_of=lambda mk, a: a[4],
                        unique_k2=self.spec.mrbg_enabled)

    def _map_phase(self, t):
        outs = self._run_tasks([lambda p=p: self._map_task(t, p) for p in range(self.n)])
        for p in range(self.n):
            attempts = 0
            while isinstance(outs[p], _Failed):
                attempts += 1
                if attempts > MAX_ATTEMPTS:
                    raise JobError(f"prime map {p} kept failing") from outs[p].exc
                self._recover_map(t, p)
                outs[p] = self._run_tasks([lambda p=p: self._map_task(t, p)])[0]
        return outs

    def _recover_map(self, t, p):
        target = self.sched.reschedule_map(p)
        self._note_recovery(("map", t, p))
        log.info("prime map %d of iteration %d rerun on worker %d", p, t, target)
        ck = self._checkpoint_for(t)
        self.structure[p] = self._load_structure(p)
        self._by_dk[p] = None
        d = GLOBAL if self.app.replicated else p
        self._restore_partition(ck, d)

    def _barrier(self, t, outs):
        """Map/Reduce barrier: surface worker failures and redo their map tasks."""
        for f in self.injector.worker_failures(t):
            self.injector.mark(f)
            w = self.sched.map_owner[f.partition]
            try:
                moved = self.sched.fail_worker(w)
            except NoHealthyWorker as e:
                raise JobError(f"worker {w} failed at iteration {t} and no healthy worker is left") from e
            self._note_recovery(("worker", t, w))
            log.info("worker %d lost at iteration %d; moved partitions %s", w, t, moved)
            ck = self._checkpoint_for(t)
            for p in moved:
                self.structure[p] = self._load_structure(p)
                self._by_dk[p] = None
                self._restore_partition(ck, p, wipe=True)
            if self.app.replicated:
                self._restore_partition(ck, GLOBAL)
            redo = self._run_tasks([lambda p=p: self._map_task(t, p) for p in moved])
            for p, r in zip(moved, redo):
                if isinstance(r, _Failed):
                    raise JobError(f"prime map {p} failed again after worker loss") from r.exc
                outs[p] = r

    # -- reduce -------------------------------------------------------------

    def _reduce_task(self, t, q, outs):
        res = {}
        calls = 0
        if self.mrbg_active:
            store = self.stores[q]
            edges = list(shuffle_sort(outs, q))
            n_keys = sum(1 for _ in group_by_key(edges))
            # The store spills its append buffer before dying so the file holds a partial batch.
            gen = store.merge_delta(iter(edges))
            for k2, merged in self._inject(TaskKind.PRIME_REDUCE, t, q, _Lazy(gen, n_keys),
                                           before_fire=store._spill_buffer):
                if merged:
                    res[k2] = self._call_reduce(q, k2, [e.v2 for e in merged])
                    calls += 1
                else:
                    res[k2] = None
        else:
            groups = list(group_by_key(shuffle_sort(outs, q)))
            for k2, edges in self._inject(TaskKind.PRIME_REDUCE, t, q, groups):
                res[k2] = self._call_reduce(q, k2, [e.v2 for e in edges])
                calls += 1
        return res, calls

    def _call_reduce(self, q, k2, values):
        try:
            out = list(self.app.reduce(k2, values))
        except Exception as e:
            raise TaskError(f"pr{q}", k2, e) from e
        if self.app.replicated:
            return out
        if len(out) != 1 or out[0][0] != k2:
            raise JobError(f"prime reduce for {k2!r} must emit exactly one ({k2!r}, value) pair, got {out!r}")
        return out[0][1]

    def _reduce_phase(self, t, outs):
        res = self._run_tasks([lambda q=q: self._reduce_task(t, q, outs) for q in range(self.n)])
        for q in range(self.n):
            attempts = 0
            while isinstance(res[q], _Failed):
                attempts += 1
                if attempts > MAX_ATTEMPTS:
                    raise JobError(f"prime reduce {q} kept failing") from res[q].exc
                self._recover_reduce(t, q)
                res[q] = self._run_tasks([lambda q=q: self._reduce_task(t, q, outs)])[0]
        return res

    def _recover_reduce(self, t, q):
        target = self.sched.reschedule_reduce(q)
        self._note_recovery(("reduce", t, q))
        log.info("prime reduce %d of iteration %d rerun on worker %d", q, t, target)
        if self.mrbg_active:
            ck = self._checkpoint_for(t)
            store = self.stores[q]
            store.close()
            self.stores[q] = None
            for path in (store.dat_path, store.idx_path):
                if os.path.exists(path):
                    os.remove(path)
            self.ckpts.restore(ck, q, self._pdir(q))
            self._open_store(q)

    # -- commit -------------------------------------------------------------

    def _emit(self, s, changes):
        """Fold re-reduced values into slot ``s``; return (pending, metric)."""
        app = self.app
        computed, visible, acc = self.computed[s], self.visible[s], self.acc[s]
        cpc = CpcState(self.spec.filter_threshold, app.diff, acc) if self.cpc_on else None
        pending = {}
        metric = 0.0
        for dk in sorted(changes):
            curr = changes[dk]
            prev = computed.get(dk)
            if curr is None:
                if prev is not None:
                    metric += app.distance(prev, app.init(dk))
                    del computed[dk]
                acc.pop(dk, None)
                if dk in visible:
                    pending[dk] = (visible.pop(dk), None)
                continue
            computed[dk] = curr
            metric += app.distance(self._eff(prev, dk), curr)
            vis = visible.get(dk)
            if vis is None or prev is None:
                emit = True
                acc.pop(dk, None)
            elif cpc is not None:
                emit = cpc.observe(dk, curr, prev)
            else:
                emit = curr != vis
            if emit:
                pending[dk] = (vis, curr)
                visible[dk] = curr
        return pending, metric

    def _commit(self, t, res):
        n_prev = sum(len(v) for v in self.visible)
        if self.app.replicated:
            outputs = []
            for r, _ in res:
                for k2 in sorted(r):
                    if r[k2] is not None:
                        outputs.extend(KvRecord(k, v) for k, v in r[k2])
            new = self.app.collect(dict(self.computed[0]), outputs)
            changes = {dk: new.get(dk) for dk in set(new) | set(self.computed[0])}
            self.pending[0], metric = self._emit(0, changes)
        else:
            metric = 0.0
            for q, (r, _) in enumerate(res):
                for k2 in r:
                    if self.part(k2) != q:
                        raise JobError(f"state key {k2!r} reduced outside its partition")
                self.pending[q], m = self._emit(q, r)
                metric += m
        changed = sum(len(p) for p in self.pending)
        new_keys = sum(1 for p in self.pending for old, _ in p.values() if old is None)
        return metric, changed, new_keys, p_delta(changed, n_prev, new_keys)

    # -- driver -------------------------------------------------------------

    def _load_inputs(self, structure, state):
        recs = _as_structure(structure)
        self.structure, dparts = partition_data(self.app, recs, state or {}, self.n)
        self._reset_state()
        if self.app.replicated:
            self.visible[0] = dict(dparts[0]) if dparts else {}
        else:
            for p, items in enumerate(dparts):
                self.visible[p] = dict(items)
        for s in range(len(self.visible)):
            self.computed[s] = dict(self.visible[s])

    def _prepare_dirs(self, fresh):
        if fresh and os.path.exists(self.workdir):
            shutil.rmtree(self.workdir)
        os.makedirs(self.workdir, exist_ok=True)
        ck_root = os.path.join(self.workdir, "ckpt")
        if os.path.exists(ck_root):
            shutil.rmtree(ck_root)
        if self.spec.checkpoint_every > 0:
            self.ckpts = CheckpointManager(ck_root)

    def run(self, structure, state=None, lineage=None):
        """Run the plain iterative loop from ``state`` (default: empty, so ``init`` seeds it)."""
        if self.spec.mode not in (Mode.ITERATIVE, Mode.INCR_ITERATIVE):
            raise JobError(f"iterative runtime cannot execute mode {self.spec.mode}")
        self._prepare_dirs(fresh=True)
        self._load_inputs(structure, state)
        self._write_structure()
        self.mrbg_active = False
        return self._drive(lineage or ConvergedSnapshot.new_lineage())

    def run_incremental(self, delta_structure):
        """Refresh the converged snapshot in ``workdir`` with a structure delta."""
        snap = ConvergedSnapshot.load(self.workdir)
        snap.check(self.app, self.spec)
        self._prepare_dirs(fresh=False)
        self.structure = [self._load_structure(p) for p in range(self.n)]
        for d in self._state_dirs():
            self._load_slot(d)
        for s in range(len(self.pending)):
            self.pending[s] = {}
        deltas = _as_delta(delta_structure)
        self.delta_struct = [[] for _ in range(self.n)]
        for d in deltas:
            dk = _project(self.app, d.record.key)
            p = self.part(d.record.key if self.app.replicated else dk)
            self.delta_struct[p].append((dk, d))
        for p in range(self.n):
            self.delta_struct[p].sort(key=lambda x: (x[0], x[1].record.key, x[1].mk, x[1].sign != DELETE))
            self.structure[p] = _apply_structure_delta(self.structure[p], self.delta_struct[p])
        self._write_structure()
        self._by_dk = [None] * self.n
        self.mrbg_active = snap.mrbg_valid and self.spec.mrbg_enabled
        if self.mrbg_active:
            for p in range(self.n):
                self._open_store(p)
        return self._drive(snap.lineage)

    def _drive(self, lineage):
        spec = self.spec
        self.trace = []
        self._first = 1
        self._checkpoint(0)
        t = 0
        converged = False
        rising = 0
        last_metric = None
        while t < spec.max_iterations:
            t += 1
            try:
                row = self._step(t)
            except _Rollback as rb:
                t = self._global_rollback(rb.ckpt)
                continue
            self.metrics.emit("iteration", **row)
            metric = row["l1_delta"]
            # A key seen for the first time has nothing to converge against yet.
            if row["propagated"] == 0 or (metric <= spec.tolerance and row["new_keys"] == 0):
                converged = True
                break
            if spec.divergence_patience:
                rising = rising + 1 if last_metric is not None and metric > last_metric else 0
                if rising >= spec.divergence_patience:
                    raise DivergenceError(
                        f"metric grew for {rising} consecutive iterations (now {metric})", self.trace)
            last_metric = metric
        mrbg_valid = self._finish_mrbg()
        self._persist()
        self._replicate()
        paths = self._write_results()
        snap = ConvergedSnapshot(self.workdir, self.app.name, self.n, self.app.replicated, mrbg_valid,
                                 lineage, t)
        snap.save()
        state = {}
        for c in self.computed:
            state.update(c)
        visible = {}
        for v in self.visible:
            visible.update(v)
        self.metrics.emit("job", mode=spec.mode.value, iterations=t, converged=converged,
                          mrbg_valid=mrbg_valid, recoveries=len(self.recoveries))
        return IterativeResult(state, visible, self.trace, t, converged, mrbg_valid, self.workdir, paths,
                               self.backward_bytes, list(self.recoveries), self.sched.table())

    def _step(self, t):
        t0 = time.perf_counter()
        was_active = self.mrbg_active
        outs = self._map_phase(t)
        self._barrier(t, outs)
        res = self._reduce_phase(t, outs)
        metric, changed, new_keys, pd = self._commit(t, res)
        if self.mrbg_active and pd > self.spec.auto_off_threshold:
            log.info("iteration %d: P_delta %.3f above threshold; MRBGraph maintenance off", t, pd)
            self.mrbg_active = False
            self.disabled = True
        if self.app.replicated:
            os.makedirs(self._pdir(GLOBAL), exist_ok=True)
            _write_state(os.path.join(self._pdir(GLOBAL), "state.run"), self.visible[0])
            self.backward_bytes += self._replicate()
        calls = sum(r[1] for r in res)
        retracted = sum(1 for r, _ in res for v in r.values() if v is None)
        row = {
            "iteration": t,
            "l1_delta": metric,
            "seconds": time.perf_counter() - t0,
            "bytes_shuffled": sum(o.bytes for o in outs),
            "records_shuffled": sum(o.records for o in outs),
            "propagated": changed,
            "new_keys": new_keys,
            "p_delta": pd,
            "mrbg_enabled": was_active,
            "reduce_invocations": calls + retracted,
            "checkpoint_seconds": 0.0,
            "checkpoint_bytes": 0,
            "backward_bytes": self.backward_bytes,
        }
        self.trace.append(row)
        row["checkpoint_seconds"], row["checkpoint_bytes"] = self._checkpoint(t)
        return row

    def _finish_mrbg(self):
        """Make the stores match the visible state; return whether they do."""
        if not self.spec.mrbg_enabled:
            return False
        if self.mrbg_active:
            if any(self.pending):
                t = self.trace[-1]["iteration"] + 1 if self.trace else 1
                self._first = None
                outs = self.pool.run([lambda p=p: self._map_task(t, p) for p in range(self.n)])
                self.pool.run([lambda q=q: list(self.stores[q].merge_delta(shuffle_sort(outs, q)))
                               for q in range(self.n)])
            for s in self.pending:
                s.clear()
            return True
        if self.disabled:
            # Stores stay on disk but are stale; the next job starts with a full run.
            for s in self.pending:
                s.clear()
            return False
        # Full rebuild from the visible state.
        outs = self.pool.run([lambda p=p: self._map_task(0, p) for p in range(self.n)])

        def build(q):
            store = self._open_store(q)
            store.close()
            for path in store.files():
                os.remove(path)
            store = self._open_store(q)
            store.build(group_by_key(shuffle_sort(outs, q)))
            return len(store)
        self.pool.run([lambda q=q: build(q) for q in range(self.n)])
        for s in self.pending:
            s.clear()
        return True

    def _write_results(self):
        out_dir = os.path.join(self.workdir, "results")
        if os.path.exists(out_dir):
            shutil.rmtree(out_dir)
        os.makedirs(out_dir)
        paths = []
        for s, state in enumerate(self.computed):
            path = os.path.join(out_dir, f"part-{s:05d}.run")
            _write_state(path, state)
            paths.append(path)
        return paths


class _Lazy:
    """Sized wrapper over an iterator so injection can compute its trigger."""

    def __init__(self, it, n):
        self._it = it
        self._n = n

    def __len__(self):
        return self._n

    def __iter__(self):
        return iter(self._it)


def _as_structure(structure):
    if structure and isinstance(structure[0], (list, str, os.PathLike)):
        out = []
        for i, s in enumerate(structure):
            out.extend(as_input_records(s, i))
        return out
    return as_input_records(structure, 0)


def _as_delta(delta):
    out = []
    for d in delta or []:
        if isinstance(d, DeltaRecord):
            out.append(d)
        elif isinstance(d, (str, os.PathLike)):
            out.extend(open_sorted_run(d))
        else:
            out.extend(d)
    return out


def _apply_structure_delta(structure, deltas):
    cur = {rec.mk: (dk, rec) for dk, rec in structure}
    for dk, d in deltas:
        if d.sign == DELETE:
            old = cur.get(d.mk)
            if old is not None and old[1].key == d.record.key and old[1].value == d.record.value:
                del cur[d.mk]
        else:
            cur[d.mk] = (dk, InputRecord(d.record.key, d.mk, d.record.value))
    return sorted(cur.values(), key=lambda x: (x[0], x[1].key, x[1].mk))


def run_iterative(app, spec, structure, state=None, workdir=None, metrics=None, pool=None, injector=None):
    """Run an iterative job to convergence and save a snapshot in ``workdir``."""
    import tempfile

    workdir = workdir or tempfile.mkdtemp(prefix="imr-iter-")
    rt = IterativeRuntime(app, spec, workdir, metrics=metrics, pool=pool, injector=injector)
    try:
        return rt.run(structure, state)
    finally:
        rt.close()
