"""Counter-based deterministic randomness.

Every random decision in the package (graph edges, partition homes, feature
rows, neighbor draws, batch permutations, merge shuffles) is a pure function
of an explicit 64-bit key built from splitmix64-style mixing.  Nothing keeps
RNG state, so results are identical across runs, thread counts, and the
numba/numpy kernel backends.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

U64 = np.uint64


def mix64(x: int) -> int:
    """splitmix64 finalizer of a single 64-bit word."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def hash_u64(*words: int) -> int:
    """Fold a tuple of integers into one 64-bit hash.

    hash_u64(a, b, c) == mix64(mix64(mix64(a) ^ b) ^ c); the chaining makes
    prefixes reusable (see chain/hash_vec).
    """
    h = 0
    for w in words:
        h = mix64(h ^ (int(w) & MASK64))
    return h


# chain() is hash_u64 under a name that signals "partial key, extend me".
chain = hash_u64


def mix64_vec(x: np.ndarray) -> np.ndarray:
    """Vectorized mix64 over a uint64 array."""
    z = np.asarray(x, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        z += U64(_GOLDEN)
        z ^= z >> U64(30)
        z *= U64(_MIX1)
        z ^= z >> U64(27)
        z *= U64(_MIX2)
        z ^= z >> U64(31)
    return z


def hash_vec(state: int, values: np.ndarray) -> np.ndarray:
    """hash_u64(<words of state>, v) for every v, given state = chain(words)."""
    v = np.asarray(values).astype(np.uint64, copy=False)
    return mix64_vec(v ^ U64(state & MASK64))


def uniform01_vec(hashes: np.ndarray) -> np.ndarray:
    """Map 64-bit hashes to float32 uniforms in [0, 1) (24 mantissa bits)."""
    return ((hashes >> U64(40)).astype(np.float64) * 2.0**-24).astype(np.float32)


def uniform01_f64_vec(hashes: np.ndarray) -> np.ndarray:
    """Map 64-bit hashes to float64 uniforms in [0, 1) (53 mantissa bits)."""
    return (hashes >> U64(11)).astype(np.float64) * 2.0**-53


def keyed_permutation(state: int, n: int) -> np.ndarray:
    """Deterministic permutation of range(n) keyed by state.

    Sorting by per-index hashes is an unbiased shuffle as long as keys are
    distinct; ties (a ~2^-64 event) fall back to index order via stable sort.
    """
    keys = hash_vec(state, np.arange(n, dtype=np.int64))
    return np.argsort(keys, kind="stable")


def keyed_shuffle(state: int, values: np.ndarray) -> np.ndarray:
    """Deterministically shuffled copy of values."""
    values = np.asarray(values)
    return values[keyed_permutation(state, len(values))]
