from ..iterative import Dependency, IterativeApp
from .codec import abs_diff, dec_float, enc_float, parse_adjacency

INF = enc_float(float("inf"))
ZERO = enc_float(0.0)


def sssp_app(source: bytes, name="sssp"):
    """Single-source shortest paths over ``"j:w;..."`` adjacency lists.

    The reduce takes the minimum over the candidates arriving on in-edges
    (the source is pinned to 0).  Leaving the prior distance out of the
    minimum lets distances grow again when an edge weight increases.
    """

    def map_fn(sk, sv, dk, dv):
        di = dec_float(dv)
        out = [(j, enc_float(di + w)) for j, w in parse_adjacency(sv, weighted=True)]
        if not any(j == sk for j, _ in out):
            out.append((sk, b""))
        return out

    def reduce_fn(k2, values):
        if k2 == source:
            return [(k2, ZERO)]
        cands = [dec_float(v) for v in values if v]
        return [(k2, enc_float(min(cands)) if cands else INF)]

    return IterativeApp(name=name, project=lambda sk: sk, map=map_fn, reduce=reduce_fn,
                        init=lambda dk: ZERO if dk == source else INF, distance=abs_diff,
                        dependency=Dependency.ONE2ONE)


def validate_graph(records):
    """Reject negative weights before a job starts."""
    for sk, sv in records:
        parse_adjacency(sv, weighted=True)
