"""Generalized iterated matrix-vector multiplication over a blocked matrix.

Structure records are blocks ``(i, j) -> M_ij`` with ``project((i, j)) = j``,
so a block column sits next to the vector block ``v_j`` it multiplies.  The
map sends ``combine2(M_ij, v_j)`` to block row ``i``; the diagonal block
``(i, i)`` also carries ``v_i`` so the reduce can apply ``assign``.
"""

import math

from ..iterative import Dependency, IterativeApp
from .codec import dec_vec, enc_vec


def enc_block(rows) -> bytes:
    return b";".join(enc_vec(r) for r in rows)


def dec_block(b: bytes):
    return [dec_vec(r) for r in b.split(b";")]


def block_key(i, j) -> bytes:
    return f"{i},{j}".encode()


def multiply(block, vec):
    if block and len(block[0]) != len(vec):
        raise ValueError(f"block has {len(block[0])} columns but vector block has {len(vec)} entries")
    return [math.fsum(m * x for m, x in zip(row, vec)) for row in block]


def elementwise_sum(parts):
    return [math.fsum(col) for col in zip(*parts)]


def replace(old, new):
    return new


def gimv_app(size, block_size, combine2=multiply, combine_all=elementwise_sum, assign=replace,
             init_value=0.0, name="gimv"):
    nblocks = -(-size // block_size)

    def block_len(b):
        return min(block_size, size - b * block_size)

    def map_fn(sk, sv, dk, dv):
        i, j = sk.split(b",")
        mv = enc_vec(combine2(dec_block(sv), dec_vec(dv)))
        if i == j:
            return [(i, b"D" + mv + b"|" + dv)]
        return [(i, b"M" + mv)]

    def reduce_fn(k2, values):
        parts, old = [], None
        for v in values:
            if v[:1] == b"D":
                mv, _, old_b = v[1:].partition(b"|")
                old = dec_vec(old_b)
            else:
                mv = v[1:]
            parts.append(dec_vec(mv))
        if old is None:
            raise ValueError(f"block row {k2!r} has no diagonal block")
        return [(k2, enc_vec(assign(old, combine_all(parts))))]

    def distance(a, b):
        return math.fsum(abs(x - y) for x, y in zip(dec_vec(a), dec_vec(b)))

    app = IterativeApp(name=name, project=lambda sk: sk.split(b",")[1], map=map_fn, reduce=reduce_fn,
                       init=lambda dk: enc_vec([init_value] * block_len(int(dk))), distance=distance,
                       dependency=Dependency.MANY2ONE)
    app.nblocks = nblocks
    return app


def blocked_matrix(dense, block_size):
    """Split a square dense matrix into block records; diagonal blocks are always kept."""
    n = len(dense)
    if any(len(row) != n for row in dense):
        raise ValueError("matrix must be square")
    nb = -(-n // block_size)
    out = []
    for bi in range(nb):
        for bj in range(nb):
            rows = [dense[r][bj * block_size:(bj + 1) * block_size]
                    for r in range(bi * block_size, min((bi + 1) * block_size, n))]
            if bi == bj or any(x != 0 for r in rows for x in r):
                out.append((block_key(bi, bj), enc_block(rows)))
    return out


def blocked_vector(vec, block_size):
    return {str(b).encode(): enc_vec(vec[b * block_size:(b + 1) * block_size])
            for b in range(-(-len(vec) // block_size))}


def unblock_vector(state, size, block_size):
    out = []
    for b in range(-(-size // block_size)):
        out.extend(dec_vec(state[str(b).encode()]))
    return out
