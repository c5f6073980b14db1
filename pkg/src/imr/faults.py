"""Checkpointing, deterministic failure injection and task placement.

The scheduler keeps the task-to-worker table for prime Map and prime
Reduce tasks.  Both tasks of a partition start on the same worker and every
recovery path keeps them together:

* a failed prime Map is rerun on the worker holding its Reduce task and
  restarts from the checkpointed state;
* a failed prime Reduce is rerun on the worker holding its Map task after
  restoring its MRBGraph files from the checkpoint;
* a failed worker hands each of its Map/Reduce pairs to one healthy worker.
"""

import enum
import hashlib
import json
import logging
import os
import random
import shutil
from dataclasses import dataclass, field
from typing import Dict, List, Optional

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class TaskKind(enum.Enum):
    PRIME_MAP = "PRIME_MAP"
    PRIME_REDUCE = "PRIME_REDUCE"
    WORKER = "WORKER"


class InjectedFailure(Exception):
    def __init__(self, kind, iteration, partition):
        super().__init__(f"injected {kind.value} failure at iteration {iteration}, partition {partition}")
        self.kind = kind
        self.iteration = iteration
        self.partition = partition


class NoHealthyWorker(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class PlannedFailure:
    kind: TaskKind
    iteration: int
    partition: int
    # Fraction of the task's work done before it dies.
    trigger: float = 0.5


@dataclass
class FailurePlan:
    failures: List[PlannedFailure] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data):
        out = []
        for f in data.get("failures", []):
            out.append(PlannedFailure(TaskKind(f["kind"]), int(f["iteration"]),
                                      int(f.get("partition", 0)), float(f.get("trigger", 0.5))))
        return cls(out)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return {"failures": [{"kind": f.kind.value, "iteration": f.iteration,
                              "partition": f.partition, "trigger": f.trigger}
                             for f in self.failures]}

    @classmethod
    def seeded(cls, seed, n_partitions, spec):
        """Build a plan from ``(kind, iteration)`` pairs, drawing partitions from ``seed``."""
        rng = random.Random(seed)
        return cls([PlannedFailure(TaskKind(k), it, rng.randrange(n_partitions)) for k, it in spec])


class FailureInjector:
    """Fires each planned failure once, at the task's trigger point."""

    def __init__(self, plan: Optional[FailurePlan] = None):
        self.plan = plan or FailurePlan()
        self.fired = []

    def _match(self, kind, iteration, partition):
        for f in self.plan.failures:
            if f.kind is kind and f.iteration == iteration and f.partition == partition and f not in self.fired:
                return f
        return None

    def trigger_index(self, kind, iteration, partition, total):
        """Index of the work item at which the task dies, or None."""
        f = self._match(kind, iteration, partition)
        if f is None:
            return None
        return min(int(total * f.trigger), max(total - 1, 0))

    def fire(self, kind, iteration, partition):
        f = self._match(kind, iteration, partition)
        if f is not None:
            self.fired.append(f)
        raise InjectedFailure(kind, iteration, partition)

    def worker_failures(self, iteration):
        return [f for f in self.plan.failures
                if f.kind is TaskKind.WORKER and f.iteration == iteration and f not in self.fired]

    def mark(self, f):
        self.fired.append(f)


class Scheduler:
    """Task-to-worker table for co-located prime Map / prime Reduce pairs."""

    def __init__(self, n_partitions, nodes):
        self.nodes = nodes
        self.healthy = set(range(nodes))
        self.map_owner = {p: p % nodes for p in range(n_partitions)}
        self.reduce_owner = dict(self.map_owner)
        self.events = []

    def _pick(self):
        if not self.healthy:
            raise NoHealthyWorker("no healthy worker left")
        load = {w: 0 for w in self.healthy}
        for w in self.map_owner.values():
            if w in load:
                load[w] += 1
        return min(self.healthy, key=lambda w: (load[w], w))

    def reschedule_map(self, p):
        target = self.reduce_owner[p]
        if target not in self.healthy:
            target = self._pick()
            self.reduce_owner[p] = target
        self.map_owner[p] = target
        self.events.append(("map", p, target))
        return target

    def reschedule_reduce(self, p):
        target = self.map_owner[p]
        if target not in self.healthy:
            target = self._pick()
            self.map_owner[p] = target
        self.reduce_owner[p] = target
        self.events.append(("reduce", p, target))
        return target

    def fail_worker(self, w):
        """Mark ``w`` dead and move its Map/Reduce pairs; return moved partitions."""
        self.healthy.discard(w)
        moved = sorted(p for p, o in self.map_owner.items() if o == w)
        moved += sorted(p for p, o in self.reduce_owner.items() if o == w and p not in moved)
        for p in moved:
            target = self._pick()
            self.map_owner[p] = target
            self.reduce_owner[p] = target
            self.events.append(("worker", p, target))
        return moved

    def colocated(self):
        return all(self.map_owner[p] == self.reduce_owner[p] for p in self.map_owner)

    def table(self):
        return {p: (self.map_owner[p], self.reduce_owner[p]) for p in sorted(self.map_owner)}


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Checkpoint:
    iteration: int
    directory: str
    files: Dict[int, Dict[str, str]]
    meta: dict

    def partition_dir(self, p):
        return os.path.join(self.directory, str(p))


class CheckpointManager:
    """``<root>/<iter>/<partition>/<file>`` plus one ``manifest.json`` per iteration.

    Member files are written first and the manifest last, via rename, so an
    interrupted write leaves no manifest and the iteration is ignored.
    """

    def __init__(self, root):
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)

    def _dir(self, iteration):
        return os.path.join(self.root, str(iteration))

    def write(self, iteration, files_by_partition, meta=None):
        d = self._dir(iteration)
        if os.path.exists(os.path.join(d, MANIFEST)):
            raise CheckpointError(f"checkpoint {iteration} already exists and is immutable")
        if os.path.exists(d):
            shutil.rmtree(d)
        digests = {}
        size = 0
        for p, paths in sorted(files_by_partition.items()):
            pd = os.path.join(d, str(p))
            os.makedirs(pd, exist_ok=True)
            digests[str(p)] = {}
            for src in paths:
                if not os.path.exists(src):
                    continue
                name = os.path.basename(src)
                dst = os.path.join(pd, name)
                shutil.copyfile(src, dst)
                digests[str(p)][name] = file_digest(dst)
                size += os.path.getsize(dst)
        manifest = {"iteration": iteration, "files": digests, "meta": meta or {}}
        tmp = os.path.join(d, MANIFEST + ".tmp")
        with open(tmp, "w") as f:
            json.dump(manifest, f, sort_keys=True)
        os.replace(tmp, os.path.join(d, MANIFEST))
        return size

    def iterations(self):
        out = []
        if not os.path.isdir(self.root):
            return out
        for name in os.listdir(self.root):
            if name.isdigit() and os.path.exists(os.path.join(self.root, name, MANIFEST)):
                out.append(int(name))
        return sorted(out)

    def load(self, iteration) -> Checkpoint:
        d = self._dir(iteration)
        path = os.path.join(d, MANIFEST)
        if not os.path.exists(path):
            raise CheckpointError(f"no checkpoint for iteration {iteration}")
        with open(path) as f:
            manifest = json.load(f)
        files = {}
        for p, members in manifest["files"].items():
            files[int(p)] = {}
            for name, digest in members.items():
                fp = os.path.join(d, p, name)
                if not os.path.exists(fp) or file_digest(fp) != digest:
                    raise CheckpointError(f"checkpoint {iteration}: {p}/{name} failed digest check")
                files[int(p)][name] = fp
        return Checkpoint(iteration, d, files, manifest.get("meta", {}))

    def latest_valid(self, upto=None) -> Optional[Checkpoint]:
        for it in reversed(self.iterations()):
            if upto is not None and it > upto:
                continue
            try:
                return self.load(it)
            except CheckpointError as e:
                log.warning("rejecting checkpoint: %s", e)
        return None

    def restore(self, ckpt: Checkpoint, p, dest_dir):
        """Copy partition ``p``'s checkpointed files back into ``dest_dir``."""
        os.makedirs(dest_dir, exist_ok=True)
        for name, src in ckpt.files.get(p, {}).items():
            tmp = os.path.join(dest_dir, name + ".restore")
            shutil.copyfile(src, tmp)
            os.replace(tmp, os.path.join(dest_dir, name))

    def prune_after(self, iteration):
        for it in self.iterations():
            if it > iteration:
                shutil.rmtree(self._dir(it))

    def describe(self):
        rows = []
        for it in self.iterations():
            try:
                ck = self.load(it)
                ok = True
            except CheckpointError:
                ck, ok = None, False
            rows.append({"iteration": it, "valid": ok,
                         "partitions": len(ck.files) if ck else None})
        return rows
