"""Independent replay of the tree fusion schedule, in plain Python.

Used to cross-check the vectorized engine: same merge order, but the merge
logic is re-derived with scalar loops and no shared code.  Blocks are plain
lists of floats; similarity is an explicit dot product of normalized blocks.
"""

from __future__ import annotations

import math


def _norm(v):
    return math.sqrt(sum(x * x for x in v))


def _normalize(v):
    n = _norm(v)
    return list(v) if n == 0.0 else [x / n for x in v]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


class _Block:
    def __init__(self, slot, kvec, vvec):
        self.slot = slot
        self.k = _normalize(kvec)
        self.v = _normalize(vvec)
        self.fusable = _norm(kvec) > 0.0


def replay_fast_fusion(key_rows, value_rows, thr):
    """Sequential replay of the recursive fusion over rows of raw blocks.

    ``key_rows[i][j]`` is the raw (unnormalized) flat block vector of row i,
    slot j.  Returns (surviving slot list, set of (absorber, absorbed) slot
    pairs).
    """
    rows = []
    for i, (krow, vrow) in enumerate(zip(key_rows, value_rows)):
        rows.append([_Block((i, j), list(k), list(v)) for j, (k, v) in enumerate(zip(krow, vrow))])
    survivors, fused_pairs = _replay(rows, thr)
    return [b.slot for b in survivors], fused_pairs


def _replay(rows, thr):
    if len(rows) == 1:
        return list(rows[0]), set()
    mid = len(rows) // 2
    left, pairs_l = _replay(rows[:mid], thr)
    right, pairs_r = _replay(rows[mid:], thr)
    pairs = pairs_l | pairs_r

    consumed = [False] * len(right)
    for lb in left:
        if not lb.fusable:
            continue
        absorbed = []
        for j, rb in enumerate(right):
            if consumed[j] or not rb.fusable:
                continue
            if _dot(lb.k, rb.k) > thr:
                absorbed.append(j)
        if not absorbed:
            continue
        ksum = list(lb.k)
        vsum = list(lb.v)
        for j in absorbed:
            consumed[j] = True
            pairs.add((lb.slot, right[j].slot))
            for idx in range(len(ksum)):
                ksum[idx] += right[j].k[idx]
                vsum[idx] += right[j].v[idx]
        lb.k = _normalize(ksum)
        lb.v = _normalize(vsum)
    merged = left + [rb for j, rb in enumerate(right) if not consumed[j]]
    return merged, pairs
