"""Frequent-pair counting with an accumulator reducer.

The candidate pairs come from an earlier pass and are held in memory by
every map task.
"""

from ..incremental import Accumulator
from .wordcount import int_sum_accumulator


def pair_key(a: bytes, b: bytes) -> bytes:
    a, b = sorted((a, b))
    return a + b" " + b


def pair_count_map(candidates):
    """Map counting, per document, each candidate pair whose words both occur."""
    cands = sorted({pair_key(a, b) for a, b in candidates})
    split = [(c, tuple(c.split(b" "))) for c in cands]

    def map_fn(doc_id, text):
        words = set(text.split())
        return [(c, b"1") for c, (a, b) in split if a in words and b in words]

    return map_fn


pair_count_accumulator: Accumulator = int_sum_accumulator


def frequent_candidates(docs, min_count):
    """Trivial candidate generation: pairs of words that each occur at least ``min_count`` times."""
    from collections import Counter

    freq = Counter(w for d in docs for w in set(d.split()))
    words = sorted(w for w, c in freq.items() if c >= min_count)
    return [(a, b) for i, a in enumerate(words) for b in words[i + 1:]]
