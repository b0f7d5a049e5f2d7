"""Pure-numpy reference implementations of the hot kernels.

These must produce bit-identical results to _kernels_nb; both express the
same integer hashing decisions, only the looping strategy differs.
"""
from __future__ import annotations

import numpy as np

from .rng import U64, hash_vec, mix64, mix64_vec

# Selection keys keep the hash in the high 32 bits and the slot index in the
# low 32, so keys are distinct and "k smallest" needs no tie rule.
_HIGH32 = U64(0xFFFFFFFF00000000)


def sbm_edges(block_of: np.ndarray, mode_in: int, thr_in: int,
              mode_out: int, thr_out: int, state: int):
    """Sample every unordered pair once; return (us, vs) with u < v.

    mode: 0 = never, 1 = accept iff hash < thr, 2 = always.
    """
    n = len(block_of)
    thr_in_u = U64(thr_in)
    thr_out_u = U64(thr_out)
    us_parts = []
    vs_parts = []
    for u in range(n - 1):
        vs = np.arange(u + 1, n, dtype=np.int64)
        hu = mix64(state ^ u)
        h = hash_vec(hu, vs)
        same = block_of[u + 1:] == block_of[u]
        if mode_in == 2:
            acc_in = same
        elif mode_in == 1:
            acc_in = same & (h < thr_in_u)
        else:
            acc_in = np.zeros(len(vs), dtype=bool)
        if mode_out == 2:
            acc_out = ~same
        elif mode_out == 1:
            acc_out = ~same & (h < thr_out_u)
        else:
            acc_out = np.zeros(len(vs), dtype=bool)
        keep = acc_in | acc_out
        if keep.any():
            picked = vs[keep]
            us_parts.append(np.full(len(picked), u, dtype=np.int64))
            vs_parts.append(picked)
    if not us_parts:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    return (np.concatenate(us_parts), np.concatenate(vs_parts))


def sample_frontier(offsets: np.ndarray, targets: np.ndarray,
                    frontier: np.ndarray, fanout: int, state: int):
    """Uniform without-replacement neighbor draw for every frontier vertex.

    Returns (counts, flat): counts[i] neighbors chosen for frontier[i], and
    their ids concatenated in per-vertex ascending order.  A vertex with
    degree <= fanout keeps all neighbors; otherwise the fanout slots with the
    smallest keyed hashes win.
    """
    f = len(frontier)
    counts = np.empty(f, dtype=np.int64)
    chunks = []
    for i in range(f):
        v = int(frontier[i])
        lo = int(offsets[v])
        hi = int(offsets[v + 1])
        deg = hi - lo
        if deg <= fanout:
            counts[i] = deg
            chunks.append(targets[lo:hi])
            continue
        counts[i] = fanout
        hv = mix64(state ^ v)
        slots = np.arange(deg, dtype=np.int64)
        keys = (hash_vec(hv, slots) & _HIGH32) | slots.astype(np.uint64)
        chosen = np.sort(np.argpartition(keys, fanout)[:fanout])
        chunks.append(targets[lo:hi][chosen])
    if not chunks:
        return counts, np.empty(0, dtype=np.int64)
    return counts, np.concatenate(chunks)


def pick_k_smallest(ids: np.ndarray, k: int, state: int) -> np.ndarray:
    """Choose k of the given (sorted unique) ids uniformly; returns them sorted.

    Rank is embedded in the key low bits so ties cannot occur.
    """
    n = len(ids)
    if k >= n:
        return ids.copy()
    ranks = np.arange(n, dtype=np.int64)
    keys = (hash_vec(state, ids) & _HIGH32) | ranks.astype(np.uint64)
    chosen = np.sort(np.argpartition(keys, k)[:k])
    return ids[chosen]


def feature_rows(ids: np.ndarray, dim: int, state: int) -> np.ndarray:
    """Deterministic float32 rows in [-0.5, 0.5), a pure function of (state, v)."""
    row_state = hash_vec(state, ids)
    cols = np.arange(dim, dtype=np.uint64)
    h = mix64_vec(row_state[:, None] ^ cols[None, :])
    return (((h >> U64(40)).astype(np.float64) * 2.0**-24) - 0.5).astype(np.float32)
