"""Seeded synthetic inputs and deltas.

Every generator takes an explicit seed and produces byte-identical output
for the same arguments.
"""

import math
import random
from typing import Callable, List, Optional

from .apps.codec import enc_vec, format_adjacency, parse_adjacency
from .records import DELETE, INSERT, DeltaRecord, InputRecord, KvRecord, MapKey

WORDS = [f"w{i}" for i in range(500)]


def _vid(i) -> bytes:
    return str(i).encode()


def gen_graph(n, degree=5, seed=0, weighted=False, max_weight=10.0):
    """Random directed graph as ``(vertex, adjacency)`` records; every vertex has an out-edge."""
    if n < 2:
        raise ValueError("graph needs at least two vertices")
    rng = random.Random(seed)
    out = []
    for i in range(n):
        k = max(1, min(n - 1, int(rng.expovariate(1 / degree)) + 1))
        nbrs = set()
        while len(nbrs) < k:
            j = rng.randrange(n)
            if j != i:
                nbrs.add(j)
        edges = [(_vid(j), round(rng.uniform(1, max_weight), 3) if weighted else None) for j in sorted(nbrs)]
        out.append((_vid(i), format_adjacency(edges)))
    return out


def gen_docs(n, words_per_doc=8, vocab=200, seed=0):
    rng = random.Random(seed)
    vocab = WORDS[:vocab]
    return [(_vid(i), " ".join(rng.choice(vocab) for _ in range(rng.randint(1, words_per_doc))).encode())
            for i in range(n)]


def gen_points(n, k=2, dims=2, spread=1.0, seed=0):
    """Gaussian blobs around ``k`` random centers."""
    rng = random.Random(seed)
    centers = [[rng.uniform(-50, 50) for _ in range(dims)] for _ in range(k)]
    pts = []
    for i in range(n):
        c = centers[i % k]
        pts.append([round(rng.gauss(x, spread), 6) for x in c])
    return pts


def points_to_records(points):
    return [(_vid(i), enc_vec(p)) for i, p in enumerate(points)]


def as_records(pairs) -> List[InputRecord]:
    return [InputRecord(k, MapKey(0, i), v) for i, (k, v) in enumerate(pairs)]


def gen_data(app, size, seed=0, **params) -> List[InputRecord]:
    if app in ("pagerank", "graph"):
        pairs = gen_graph(size, params.get("degree", 5), seed)
    elif app == "sssp":
        pairs = gen_graph(size, params.get("degree", 3), seed, weighted=True)
    elif app in ("wordcount", "paircount", "docs"):
        pairs = gen_docs(size, params.get("words_per_doc", 8), params.get("vocab", 200), seed)
    elif app == "kmeans":
        pairs = points_to_records(gen_points(size, params.get("k", 2), params.get("dims", 2), seed=seed))
    else:
        raise ValueError(f"no generator for app {app!r}")
    return as_records(pairs)


# -- deltas ---------------------------------------------------------------

def mutate_graph(rng, key, value, n_vertices, weighted=False):
    """Rewire one out-edge of ``key`` (or re-weight it)."""
    nbrs = parse_adjacency(value)
    ids = {j for j, _ in nbrs}
    idx = rng.randrange(len(nbrs)) if nbrs else None
    if weighted and idx is not None and rng.random() < 0.5:
        j, w = nbrs[idx]
        nbrs[idx] = (j, round(rng.uniform(1, 10), 3))
        return format_adjacency(nbrs)
    for _ in range(20):
        j = _vid(rng.randrange(n_vertices))
        if j != key and j not in ids:
            break
    else:
        return value
    w = round(rng.uniform(1, 10), 3) if weighted else None
    if idx is None:
        nbrs.append((j, w))
    else:
        nbrs[idx] = (j, w)
    nbrs.sort()
    return format_adjacency(nbrs)


def mutate_weight(rng, key, value):
    """Change the weight of one out-edge, leaving the topology alone."""
    nbrs = parse_adjacency(value, weighted=True)
    if not nbrs:
        return value
    idx = rng.randrange(len(nbrs))
    j, w = nbrs[idx]
    nbrs[idx] = (j, round(rng.uniform(1, 10), 3))
    return format_adjacency(nbrs)


def mutate_doc(rng, key, value):
    return " ".join(rng.choice(WORDS[:200]) for _ in range(rng.randint(1, 8))).encode()


def gen_delta(base: List[InputRecord], fraction, seed=0, mutate: Optional[Callable] = None,
              new_record: Optional[Callable] = None, mix=(1.0, 0.0, 0.0)) -> List[DeltaRecord]:
    """Touch exactly ``floor(fraction * len(base))`` records.

    ``mix`` weights (update, delete, insert).  An update is a delete of the
    original record followed by an insert under the same MapKey; inserts get
    fresh MapKeys after every existing one.
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f"change fraction must lie in [0, 1], got {fraction}")
    rng = random.Random(seed)
    m = math.floor(fraction * len(base))
    if m == 0:
        return []
    mutate = mutate or mutate_doc
    kinds = rng.choices(("update", "delete", "insert"), weights=mix, k=m)
    n_existing = m - kinds.count("insert")
    chosen = sorted(rng.sample(range(len(base)), n_existing))
    fresh_part = max((r.mk.partition for r in base), default=0) + 1
    out = []
    existing = iter(chosen)
    seq = 0
    for kind in kinds:
        if kind == "insert":
            key, value = new_record(rng, seq) if new_record else (f"n{seed}-{seq}".encode(), mutate_doc(rng, b"", b""))
            out.append(DeltaRecord(KvRecord(key, value), INSERT, MapKey(fresh_part, seq)))
            seq += 1
            continue
        r = base[next(existing)]
        out.append(DeltaRecord(KvRecord(r.key, r.value), DELETE, r.mk))
        if kind == "update":
            out.append(DeltaRecord(KvRecord(r.key, mutate(rng, r.key, r.value)), INSERT, r.mk))
    out.sort(key=lambda d: (d.mk, d.sign != DELETE))
    return out


def touched(delta):
    return len({d.mk for d in delta})
