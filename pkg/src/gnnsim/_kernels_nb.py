"""numba-compiled hot kernels; bit-identical to _kernels_np."""
from __future__ import annotations

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_HIGH32 = np.uint64(0xFFFFFFFF00000000)


@njit(cache=True, inline="always")
def _mix(x):
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _sbm_pass(block_of, mode_in, thr_in, mode_out, thr_out, state, us, vs):
    n = block_of.shape[0]
    cnt = 0
    fill = us.shape[0] > 0
    for u in range(n - 1):
        hu = _mix(state ^ np.uint64(u))
        bu = block_of[u]
        for v in range(u + 1, n):
            h = _mix(hu ^ np.uint64(v))
            if block_of[v] == bu:
                ok = mode_in == 2 or (mode_in == 1 and h < thr_in)
            else:
                ok = mode_out == 2 or (mode_out == 1 and h < thr_out)
            if ok:
                if fill:
                    us[cnt] = u
                    vs[cnt] = v
                cnt += 1
    return cnt


def sbm_edges(block_of, mode_in, thr_in, mode_out, thr_out, state):
    empty = np.empty(0, dtype=np.int64)
    cnt = _sbm_pass(block_of, mode_in, np.uint64(thr_in), mode_out,
                    np.uint64(thr_out), np.uint64(state), empty, empty)
    us = np.empty(cnt, dtype=np.int64)
    vs = np.empty(cnt, dtype=np.int64)
    if cnt:
        _sbm_pass(block_of, mode_in, np.uint64(thr_in), mode_out,
                  np.uint64(thr_out), np.uint64(state), us, vs)
    return us, vs


@njit(cache=True)
def _sample_frontier(offsets, targets, frontier, fanout, state):
    f = frontier.shape[0]
    counts = np.empty(f, dtype=np.int64)
    total = 0
    for i in range(f):
        v = frontier[i]
        deg = offsets[v + 1] - offsets[v]
        c = deg if deg <= fanout else fanout
        counts[i] = c
        total += c
    flat = np.empty(total, dtype=np.int64)
    pos = 0
    for i in range(f):
        v = frontier[i]
        lo = offsets[v]
        deg = offsets[v + 1] - lo
        if deg <= fanout:
            for j in range(deg):
                flat[pos] = targets[lo + j]
                pos += 1
        else:
            hv = _mix(state ^ np.uint64(v))
            keys = np.empty(deg, dtype=np.uint64)
            for j in range(deg):
                keys[j] = (_mix(hv ^ np.uint64(j)) & _HIGH32) | np.uint64(j)
            order = np.argsort(keys)
            chosen = np.sort(order[:fanout])
            for j in range(fanout):
                flat[pos] = targets[lo + chosen[j]]
                pos += 1
    return counts, flat


def sample_frontier(offsets, targets, frontier, fanout, state):
    return _sample_frontier(offsets, targets, frontier, fanout, np.uint64(state))


@njit(cache=True)
def _pick_k_smallest(ids, k, state):
    n = ids.shape[0]
    keys = np.empty(n, dtype=np.uint64)
    for i in range(n):
        keys[i] = (_mix(state ^ np.uint64(ids[i])) & _HIGH32) | np.uint64(i)
    order = np.argsort(keys)
    return np.sort(order[:k])


def pick_k_smallest(ids, k, state):
    if k >= len(ids):
        return ids.copy()
    return ids[_pick_k_smallest(ids, k, np.uint64(state))]


@njit(cache=True)
def _feature_rows(ids, dim, state):
    n = ids.shape[0]
    out = np.empty((n, dim), dtype=np.float32)
    for i in range(n):
        hv = _mix(state ^ np.uint64(ids[i]))
        for j in range(dim):
            h = _mix(hv ^ np.uint64(j))
            out[i, j] = np.float32(np.float64(h >> np.uint64(40)) * 2.0**-24 - 0.5)
    return out


def feature_rows(ids, dim, state):
    return _feature_rows(ids, dim, np.uint64(state))
