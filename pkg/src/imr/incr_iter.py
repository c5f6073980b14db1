"""Incremental iterative processing.

A converged snapshot (visible state, latest computed state, CPC
accumulators and the MRBGraph stores) seeds the next job.  Iteration 1
feeds the structure delta through the preserved MRBGraph; later iterations
feed the state changes emitted by the previous prime Reduce.  When too
large a share of the state changes, MRBGraph maintenance is switched off
and the job finishes on the plain iterative engine.
"""

import enum
import json
import os
import uuid
from dataclasses import dataclass, field
from typing import Callable, Dict

from .engine import JobError

SNAPSHOT_FILE = "snapshot.json"


class ContractError(JobError):
    pass


class SnapshotMismatch(JobError):
    pass


class AutoOff(enum.Enum):
    KEEP_MRBG = "keep"
    DISABLE_MRBG = "disable"


@dataclass
class CpcState:
    """Per-key change accumulated since the key was last emitted."""

    threshold: float
    difference: Callable[[bytes, bytes], float]
    acc: Dict[bytes, float] = field(default_factory=dict)

    def observe(self, dk, curr, prev):
        """Accumulate one change; return True when ``dk`` should be emitted."""
        d = self.difference(curr, prev)
        if d < 0:
            raise ContractError(f"difference for {dk!r} is negative ({d})")
        a = self.acc.get(dk, 0.0) + d
        if a > self.threshold:
            self.acc.pop(dk, None)
            return True
        if a:
            self.acc[dk] = a
        return False

    def forget(self, dk):
        self.acc.pop(dk, None)


def cpc_filter(new_state, prev_state, cpc: CpcState):
    """Return the entries of ``new_state`` whose accumulated change passes the threshold.

    Keys missing from ``prev_state`` are always emitted.
    """
    out = {}
    for dk in sorted(new_state):
        curr = new_state[dk]
        prev = prev_state.get(dk)
        if prev is None:
            cpc.forget(dk)
            out[dk] = curr
        elif cpc.observe(dk, curr, prev):
            out[dk] = curr
    return out


def p_delta(n_changed, n_prev_keys, n_new_keys):
    """|dD| / |D_prev union dD| counted in keys."""
    denom = n_prev_keys + n_new_keys
    return n_changed / denom if denom else 0.0


def auto_off_check(delta_state, full_state, threshold=0.5):
    """Decide whether MRBGraph maintenance still pays off.

    ``delta_state`` holds the changed keys, ``full_state`` the state before
    the change.
    """
    new = sum(1 for k in delta_state if k not in full_state)
    pd = p_delta(len(delta_state), len(full_state), new)
    return (AutoOff.DISABLE_MRBG if pd > threshold else AutoOff.KEEP_MRBG), pd


@dataclass
class ConvergedSnapshot:
    """Metadata of a converged job directory that can seed an incremental job."""

    directory: str
    app: str
    num_partitions: int
    replicated: bool
    mrbg_valid: bool
    lineage: str
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    def save(self):
        data = {"app": self.app, "num_partitions": self.num_partitions, "replicated": self.replicated,
                "mrbg_valid": self.mrbg_valid, "lineage": self.lineage,
                "iterations": self.iterations, "extra": self.extra}
        tmp = os.path.join(self.directory, SNAPSHOT_FILE + ".tmp")
        with open(tmp, "w") as f:
            json.dump(data, f, sort_keys=True, indent=1)
        os.replace(tmp, os.path.join(self.directory, SNAPSHOT_FILE))
        return self

    @classmethod
    def load(cls, directory):
        path = os.path.join(directory, SNAPSHOT_FILE)
        if not os.path.exists(path):
            raise SnapshotMismatch(f"no converged snapshot in {directory}")
        with open(path) as f:
            d = json.load(f)
        return cls(str(directory), d["app"], d["num_partitions"], d["replicated"], d["mrbg_valid"],
                   d["lineage"], d.get("iterations", 0), d.get("extra", {}))

    def check(self, app, spec):
        if self.app != app.name:
            raise SnapshotMismatch(f"snapshot was produced by app {self.app!r}, not {app.name!r}")
        if self.num_partitions != spec.num_partitions:
            raise SnapshotMismatch(
                f"snapshot has {self.num_partitions} partitions, job asks for {spec.num_partitions}")
        if self.replicated != app.replicated:
            raise SnapshotMismatch("snapshot and app disagree on replicated state mode")

    @staticmethod
    def new_lineage():
        return uuid.uuid4().hex[:12]


def run_incr_iterative(app, spec, delta_structure, snapshot_dir, metrics=None, pool=None,
                       injector=None):
    """Refresh a converged snapshot with a structure delta; see :class:`IterativeRuntime`."""
    from .iterative import IterativeRuntime

    rt = IterativeRuntime(app, spec, snapshot_dir, metrics=metrics, pool=pool, injector=injector)
    try:
        return rt.run_incremental(delta_structure)
    finally:
        rt.close()
