import math

from ..iterative import Dependency, IterativeApp
from .codec import abs_diff, dec_float, enc_float, parse_adjacency

ONE = enc_float(1.0)


def pagerank_app(d=0.85, name="pagerank"):
    """PageRank with ``R_j = d * sum_i R_i / |N_i| + (1 - d)``.

    Every vertex also sends itself an empty marker so its reduce runs even
    without in-links.  A dangling vertex emits no mass.
    """
    if not 0 < d < 1:
        raise ValueError("damping factor must lie in (0, 1)")

    def map_fn(sk, sv, dk, dv):
        nbrs = parse_adjacency(sv)
        out = []
        if nbrs:
            share = enc_float(dec_float(dv) / len(nbrs))
            out = [(j, share) for j, _ in nbrs]
        if not any(j == sk for j, _ in nbrs):
            out.append((sk, b""))
        return out

    def reduce_fn(k2, values):
        total = math.fsum(dec_float(v) for v in values if v)
        return [(k2, enc_float(d * total + (1 - d)))]

    return IterativeApp(name=name, project=lambda sk: sk, map=map_fn, reduce=reduce_fn,
                        init=lambda dk: ONE, distance=abs_diff, dependency=Dependency.ONE2ONE)
