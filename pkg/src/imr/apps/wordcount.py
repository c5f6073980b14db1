from collections import Counter

from ..incremental import Accumulator
from .codec import enc_float, dec_float, parse_adjacency


def wordcount_map(key, text):
    """One ``(word, count)`` per distinct word of the record."""
    counts = Counter(text.split())
    return [(w, str(c).encode()) for w, c in sorted(counts.items())]


def sum_reduce(k2, values):
    return [(k2, str(sum(int(v) for v in values)).encode())]


int_sum_accumulator = Accumulator(lambda a, b: str(int(a) + int(b)).encode(), b"0")


def in_edge_sum_map(key, adjacency):
    """Send each edge weight to its target vertex."""
    return [(j, enc_float(w)) for j, w in parse_adjacency(adjacency, weighted=True)]


def float_sum_reduce(k2, values):
    import math

    return [(k2, enc_float(math.fsum(dec_float(v) for v in values)))]
