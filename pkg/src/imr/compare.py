"""Compare two result sets key by key."""

import math
import os
from dataclasses import dataclass, field
from typing import List

from .records import open_sorted_run


@dataclass
class Verdict:
    status: str
    compared: int = 0
    exact: int = 0
    max_rel_error: float = 0.0
    mean_rel_error: float = 0.0
    missing: List[bytes] = field(default_factory=list)
    extra: List[bytes] = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def ok(self):
        return self.status == "match"

    def as_dict(self):
        return {"status": self.status, "compared": self.compared, "exact": self.exact,
                "max_rel_error": self.max_rel_error, "mean_rel_error": self.mean_rel_error,
                "missing": [k.decode(errors="replace") for k in self.missing],
                "extra": [k.decode(errors="replace") for k in self.extra],
                "tolerance": self.tolerance}


def _numbers(v: bytes):
    try:
        return [float(x) for x in v.replace(b";", b",").split(b",")]
    except ValueError:
        return None


def rel_error(got: bytes, want: bytes) -> float:
    if got == want:
        return 0.0
    a, b = _numbers(got), _numbers(want)
    if a is None or b is None or len(a) != len(b):
        return math.inf
    worst = 0.0
    for x, y in zip(a, b):
        if x == y:
            continue
        if math.isinf(x) or math.isinf(y):
            return math.inf
        worst = max(worst, abs(x - y) / abs(y) if y else abs(x - y))
    return worst


def compare(got: dict, want: dict, tolerance=0.0) -> Verdict:
    """Score ``got`` against the reference ``want``."""
    missing = sorted(set(want) - set(got))
    extra = sorted(set(got) - set(want))
    common = sorted(set(got) & set(want))
    if want and got and not common:
        return Verdict("structural-mismatch", missing=missing, extra=extra, tolerance=tolerance)
    errs = [rel_error(got[k], want[k]) for k in common]
    v = Verdict("match", compared=len(common), exact=sum(1 for k in common if got[k] == want[k]),
                max_rel_error=max(errs, default=0.0),
                mean_rel_error=(math.fsum(errs) / len(errs)) if errs else 0.0,
                missing=missing, extra=extra, tolerance=tolerance)
    if missing or extra or v.max_rel_error > tolerance:
        v.status = "mismatch"
    return v


def load_results(path) -> dict:
    """Read a results directory (its ``part-*``/``results-*`` run files) or a single run file."""
    files = [path]
    if os.path.isdir(path):
        files = sorted(os.path.join(path, f) for f in os.listdir(path)
                       if f.endswith(".run") and f.startswith(("part-", "results-")))
    out = {}
    for f in files:
        for r in open_sorted_run(f):
            out[r.key] = r.value
    return out
