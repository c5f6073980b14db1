"""Byte encodings shared by the apps.

Ids are ASCII decimal; reals use ``repr`` so they round-trip exactly.
"""

import math


def enc_float(x: float) -> bytes:
    return repr(float(x)).encode()


def dec_float(b: bytes) -> float:
    return float(b)


def enc_vec(xs) -> bytes:
    return b",".join(enc_float(x) for x in xs)


def dec_vec(b: bytes):
    return [float(x) for x in b.split(b",")] if b else []


def parse_adjacency(sv: bytes, weighted=False):
    """Parse ``"j1:w1;j2:w2"`` (or ``"j1;j2"``) into ``[(j, w)]``."""
    out = []
    seen = set()
    if not sv:
        return out
    for item in sv.split(b";"):
        if not item:
            continue
        j, sep, w = item.partition(b":")
        if j in seen:
            raise ValueError(f"duplicate neighbor {j!r} in adjacency list")
        seen.add(j)
        if weighted:
            if not sep:
                raise ValueError(f"missing weight for neighbor {j!r}")
            wf = float(w)
            if wf < 0 or math.isnan(wf):
                raise ValueError(f"negative or NaN edge weight {w!r} for neighbor {j!r}")
            out.append((j, wf))
        else:
            out.append((j, float(w) if sep else None))
    return out


def format_adjacency(neighbors) -> bytes:
    """Inverse of :func:`parse_adjacency`; ``neighbors`` is ``[(j, w or None)]``."""
    parts = []
    for j, w in neighbors:
        j = j if isinstance(j, bytes) else str(j).encode()
        parts.append(j if w is None else j + b":" + enc_float(w))
    return b";".join(parts)


def abs_diff(a: bytes, b: bytes) -> float:
    x, y = float(a), float(b)
    if x == y:
        return 0.0
    return abs(x - y)
