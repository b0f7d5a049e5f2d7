"""Partitioned vertex-feature shards, byte-exact fetch accounting, pre-gathering.

All byte accounting uses 4 bytes per element (features are 32-bit reals);
a "message" is one batched (src, dst, category) transfer.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import InvariantViolation
from .graph import PartitionMap
from .rng import chain

BYTES_PER_ELEM = 4

FEATURE = "feature"
MODEL = "model"
GRADIENT = "gradient"
INTERMEDIATE = "intermediate"
TOPOLOGY = "topology"
CATEGORIES = (FEATURE, MODEL, GRADIENT, INTERMEDIATE, TOPOLOGY)

_FEAT_MAGIC = b"FEAT"


class CommLedger:
    """Per-directed-link byte/message counters, categorized.

    Counters only grow and self-links are rejected.  Every add is also kept
    as an event so totals can be recomputed independently.  Merging is
    commutative, so per-server ledgers folded in any order match the
    sequential ledger.
    """

    def __init__(self):
        self.counters: dict[tuple[int, int, str], list[float]] = {}
        self.events: list[tuple[int, int, str, float, int]] = []

    def add(self, src: int, dst: int, category: str, nbytes: float,
            messages: int = 1) -> None:
        if src == dst:
            raise InvariantViolation(f"self-link {src}->{dst} in ledger")
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category!r}")
        if nbytes < 0 or messages < 0:
            raise ValueError("ledger counters only grow")
        cell = self.counters.setdefault((src, dst, category), [0.0, 0])
        cell[0] += nbytes
        cell[1] += messages
        self.events.append((src, dst, category, nbytes, messages))

    def merge(self, other: "CommLedger") -> None:
        for (src, dst, cat), (b, m) in other.counters.items():
            cell = self.counters.setdefault((src, dst, cat), [0.0, 0])
            cell[0] += b
            cell[1] += m
        self.events.extend(other.events)

    def bytes_by_category(self) -> dict[str, float]:
        out = {c: 0.0 for c in CATEGORIES}
        for (_, _, cat), (b, _) in self.counters.items():
            out[cat] += b
        return out

    def messages_by_category(self) -> dict[str, int]:
        out = {c: 0 for c in CATEGORIES}
        for (_, _, cat), (_, m) in self.counters.items():
            out[cat] += m
        return out

    def total_bytes(self) -> float:
        return sum(b for b, _ in self.counters.values())

    def link(self, src: int, dst: int, category: str) -> tuple[float, int]:
        b, m = self.counters.get((src, dst, category), (0.0, 0))
        return b, m

    def copy(self) -> "CommLedger":
        dup = CommLedger()
        dup.merge(self)
        return dup


@dataclass
class FetchStats:
    """Feature-row traffic counters behind the miss-rate metric."""

    requested: int = 0
    local: int = 0
    staged: int = 0
    transferred: int = 0

    @property
    def miss_rate(self) -> float:
        return self.transferred / self.requested if self.requested else 0.0

    def merge(self, other: "FetchStats") -> None:
        self.requested += other.requested
        self.local += other.local
        self.staged += other.staged
        self.transferred += other.transferred


@dataclass(frozen=True)
class FeatureStore:
    """Vertex features sharded by home server.

    Row v lives only in shard home(v); generated rows depend solely on
    (seed, v, dim) so resharding never changes values.
    """

    dim: int
    partition: PartitionMap
    shards: tuple[tuple[np.ndarray, np.ndarray], ...]  # per server: (ids, rows)
    source: str

    @property
    def n_vertices(self) -> int:
        return self.partition.n_vertices

    def rows(self, ids: np.ndarray) -> np.ndarray:
        """Rows for the given ids, in input order (float32)."""
        ids = np.asarray(ids, dtype=np.int64)
        out = np.empty((len(ids), self.dim), dtype=np.float32)
        homes = self.partition.home[ids]
        for s in np.unique(homes):
            shard_ids, shard_rows = self.shards[s]
            sel = homes == s
            out[sel] = shard_rows[np.searchsorted(shard_ids, ids[sel])]
        return out

    def row(self, v: int) -> np.ndarray:
        return self.rows(np.array([v], dtype=np.int64))[0]

    def fetch(self, at: int, ids: np.ndarray, ledger: CommLedger,
              stats: FetchStats | None = None) -> np.ndarray:
        """Gather rows at a server: local reads are free, remote ids are
        grouped by home with one message and |group|*dim*4 bytes per link."""
        ids = np.asarray(ids, dtype=np.int64)
        homes = self.partition.home[ids]
        if stats is not None:
            stats.requested += len(ids)
        for s in np.unique(homes):
            count = int(np.count_nonzero(homes == s))
            if s == at:
                if stats is not None:
                    stats.local += count
                continue
            ledger.add(int(s), at, FEATURE, count * self.dim * BYTES_PER_ELEM, 1)
            if stats is not None:
                stats.transferred += count
        return self.rows(ids)


def init_features(p: PartitionMap, dim: int, source: str = "generated",
                  seed: int = 0, path: str | Path | None = None) -> FeatureStore:
    """Build a store from the counter RNG ("generated") or a FEAT file."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if source == "generated":
        matrix = kernels.feature_rows(np.arange(p.n_vertices, dtype=np.int64),
                                      dim, chain(seed, 0xFE))
        label = f"generated(seed={seed})"
    elif source == "file":
        if path is None:
            raise ValueError("file source needs a path")
        matrix = read_feature_file(path)
        if matrix.shape != (p.n_vertices, dim):
            raise ValueError(f"feature file is {matrix.shape}, expected "
                             f"({p.n_vertices}, {dim})")
        label = str(path)
    else:
        raise ValueError(f"unknown feature source {source!r}")
    shards = []
    for s in range(p.n_servers):
        ids = np.flatnonzero(p.home == s).astype(np.int64)
        shards.append((ids, matrix[ids]))
    return FeatureStore(dim, p, tuple(shards), label)


def write_feature_file(matrix: np.ndarray, path: str | Path) -> None:
    """magic "FEAT", little-endian u64 n and dim, then n*dim f32 row-major."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_FEAT_MAGIC)
        f.write(struct.pack("<QQ", matrix.shape[0], matrix.shape[1]))
        f.write(matrix.tobytes())


def read_feature_file(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _FEAT_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_FEAT_MAGIC!r}")
        n, dim = struct.unpack("<QQ", f.read(16))
        data = np.frombuffer(f.read(4 * n * dim), dtype="<f4")
        if len(data) != n * dim:
            raise ValueError("feature file truncated")
    return data.reshape(n, dim).astype(np.float32)


@dataclass(frozen=True)
class PregatherPlan:
    """Deduplicated remote rows one server needs for a whole iteration."""

    server: int
    by_source: tuple[tuple[int, np.ndarray], ...]  # (home server, ascending ids)

    @property
    def total_rows(self) -> int:
        return sum(len(ids) for _, ids in self.by_source)

    @property
    def all_ids(self) -> np.ndarray:
        if not self.by_source:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([ids for _, ids in self.by_source])


def plan_pregather(at: int, micrographs: Iterable, p: PartitionMap) -> PregatherPlan:
    """Union the vertex needs of every micrograph the server will train this
    iteration, drop local ids, and group the rest by home server."""
    sets = [m.vertices for m in micrographs]
    if sets:
        needed = np.unique(np.concatenate(sets))
    else:
        needed = np.empty(0, dtype=np.int64)
    homes = p.home[needed] if len(needed) else np.empty(0, dtype=np.int64)
    remote = needed[homes != at]
    remote_homes = p.home[remote] if len(remote) else np.empty(0, dtype=np.int64)
    groups = tuple((int(s), remote[remote_homes == s])
                   for s in np.unique(remote_homes))
    return PregatherPlan(at, groups)


@dataclass(frozen=True)
class StagedFeatures:
    """Iteration-scoped table of pre-gathered rows (dropped at iteration end)."""

    ids: np.ndarray
    rows: np.ndarray
    dim: int

    @property
    def staged_bytes(self) -> int:
        return len(self.ids) * self.dim * BYTES_PER_ELEM

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.ids, ids)
        if len(ids) and (np.any(pos >= len(self.ids)) or np.any(self.ids[pos] != ids)):
            raise KeyError("id missing from staged table")
        return self.rows[pos]

    def contains(self, ids: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.ids, ids)
        pos = np.minimum(pos, max(len(self.ids) - 1, 0))
        if len(self.ids) == 0:
            return np.zeros(len(ids), dtype=bool)
        return self.ids[pos] == ids


def execute_pregather(plan: PregatherPlan, fs: FeatureStore,
                      ledger: CommLedger, stats: FetchStats | None = None) -> StagedFeatures:
    """One message per source server; the staged table holds exactly the plan."""
    for src, ids in plan.by_source:
        ledger.add(src, plan.server, FEATURE, len(ids) * fs.dim * BYTES_PER_ELEM, 1)
        if stats is not None:
            stats.transferred += len(ids)
    ids = plan.all_ids
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    rows = fs.rows(ids) if len(ids) else np.empty((0, fs.dim), dtype=np.float32)
    return StagedFeatures(ids, rows, fs.dim)
