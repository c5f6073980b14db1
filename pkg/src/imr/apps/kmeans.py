import math

from ..iterative import Dependency, IterativeApp
from .codec import dec_vec, enc_vec

STATE_KEY = b"1"


def enc_centroids(cents) -> bytes:
    return b";".join(enc_vec(c) for c in cents)


def dec_centroids(b: bytes):
    return [dec_vec(x) for x in b.split(b";")]


def nearest(point, cents):
    """Index of the closest centroid; ties go to the smallest id."""
    best, best_d = 0, math.inf
    for cid, c in enumerate(cents):
        dist = math.fsum((a - b) ** 2 for a, b in zip(point, c))
        if dist < best_d:
            best, best_d = cid, dist
    return best


def mean(points):
    n = len(points)
    return [math.fsum(col) / n for col in zip(*points)]


def kmeans_app(initial, name="kmeans"):
    """Lloyd's k-means; the whole centroid set is one replicated state record.

    Centroid ids are ``0..k-1``.  A cluster that loses all its points keeps
    its previous centroid.
    """
    k = len(initial)
    if k == 0:
        raise ValueError("need at least one centroid")
    seed_state = enc_centroids(initial)
    cache = {}

    def centroids(dv):
        c = cache.get(dv)
        if c is None:
            cache.clear()
            c = cache[dv] = dec_centroids(dv)
        return c

    def map_fn(sk, sv, dk, dv):
        return [(str(nearest(dec_vec(sv), centroids(dv))).encode(), sv)]

    def reduce_fn(cid, values):
        return [(cid, enc_vec(mean([dec_vec(v) for v in values])))]

    def collect(prior, outputs):
        cents = dec_centroids(prior.get(STATE_KEY, seed_state))
        for cid, val in outputs:
            cents[int(cid)] = dec_vec(val)
        return {STATE_KEY: enc_centroids(cents)}

    def distance(a, b):
        return math.fsum(abs(x - y) for ca, cb in zip(dec_centroids(a), dec_centroids(b)) for x, y in zip(ca, cb))

    return IterativeApp(name=name, project=lambda sk: STATE_KEY, map=map_fn, reduce=reduce_fn,
                        init=lambda dk: seed_state, distance=distance, dependency=Dependency.MANY2ONE,
                        replicated=True, collect=collect)


def lloyd(points, centroids, max_iterations=100):
    """Single-threaded reference loop; stops when the centroids stop moving."""
    cents = [list(c) for c in centroids]
    for _ in range(max_iterations):
        groups = {}
        for p in points:
            groups.setdefault(nearest(p, cents), []).append(p)
        new = [mean(groups[c]) if c in groups else cents[c] for c in range(len(cents))]
        if new == cents:
            break
        cents = new
    return cents


def wcss(points, cents):
    return math.fsum(min(math.fsum((a - b) ** 2 for a, b in zip(p, c)) for c in cents) for p in points)
