"""Global graph representation, generation, loading, and partitioning.

Graphs are immutable CSR with canonically sorted, deduplicated adjacency.
Edge-list input is treated as undirected and symmetrized; sampling elsewhere
reads targets as in-neighbors (message sources).
"""
from __future__ import annotations

import heapq
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from . import kernels
from .errors import EdgeListError
from .rng import chain, hash_vec

_CSR_MAGIC = b"CSR1"


@dataclass(frozen=True)
class Graph:
    """Immutable CSR adjacency.

    offsets has length n_vertices + 1; targets holds neighbor ids sorted
    strictly ascending within each vertex's range (no duplicates, no
    self-loops unless added via add_self_loops).
    """

    n_vertices: int
    offsets: np.ndarray
    targets: np.ndarray
    directed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.ascontiguousarray(self.offsets, dtype=np.int64))
        object.__setattr__(self, "targets", np.ascontiguousarray(self.targets, dtype=np.int64))
        n = self.n_vertices
        if len(self.offsets) != n + 1 or self.offsets[0] != 0 or self.offsets[-1] != len(self.targets):
            raise ValueError("inconsistent CSR offsets")
        if np.any(np.diff(self.offsets) < 0):
            raise ValueError("offsets must be non-decreasing")
        if len(self.targets) and (self.targets.min() < 0 or self.targets.max() >= n):
            raise ValueError("target id out of range")

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def degree(self, v: int) -> int:
        return int(self.offsets[v + 1] - self.offsets[v])

    def neighbors(self, v: int) -> np.ndarray:
        return self.targets[self.offsets[v]:self.offsets[v + 1]]

    def undirected_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(us, vs) with u <= v, each undirected edge once."""
        src = np.repeat(np.arange(self.n_vertices, dtype=np.int64), self.degrees())
        keep = src <= self.targets
        return src[keep], self.targets[keep]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Graph)
                and self.n_vertices == other.n_vertices
                and self.directed == other.directed
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.targets, other.targets))


def from_pairs(n_vertices: int, us: np.ndarray, vs: np.ndarray,
               symmetrize: bool = True, drop_self_loops: bool = True) -> Graph:
    """Build a canonical CSR graph from edge endpoint arrays.

    Duplicates collapse; self-loops are dropped unless requested
    (add_self_loops reintroduces them explicitly when aggregation needs them).
    """
    us = np.asarray(us, dtype=np.int64)
    vs = np.asarray(vs, dtype=np.int64)
    if drop_self_loops:
        keep = us != vs
        us, vs = us[keep], vs[keep]
    if symmetrize:
        us, vs = np.concatenate([us, vs]), np.concatenate([vs, us])
    if len(us):
        code = us * n_vertices + vs
        code = np.unique(code)
        us = code // n_vertices
        vs = code % n_vertices
    counts = np.bincount(us, minlength=n_vertices)
    offsets = np.zeros(n_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return Graph(n_vertices, offsets, vs)


def add_self_loops(g: Graph) -> Graph:
    """Return a copy with (v, v) present for every vertex."""
    us, vs = g.undirected_edges()
    loops = np.arange(g.n_vertices, dtype=np.int64)
    return from_pairs(g.n_vertices, np.concatenate([us, loops]),
                      np.concatenate([vs, loops]), drop_self_loops=False)


def load_edge_list(source: IO[str] | str | Path, n_vertices: int | None = None) -> Graph:
    """Parse "u v" lines into an undirected canonical CSR graph.

    Lines starting with '#' and blank lines are ignored.  Malformed lines
    raise EdgeListError with the line number; negative ids or ids >= a
    declared n_vertices raise EdgeListError as range errors.  Without a
    declared size, n = max id + 1.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="ascii") as f:
            return load_edge_list(f, n_vertices)
    us: list[int] = []
    vs: list[int] = []
    max_id = -1
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise EdgeListError(f"line {lineno}: expected 'u v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise EdgeListError(f"line {lineno}: non-integer vertex id in {line!r}") from None
        if u < 0 or v < 0:
            raise EdgeListError(f"line {lineno}: negative vertex id in {line!r}")
        if n_vertices is not None and (u >= n_vertices or v >= n_vertices):
            raise EdgeListError(f"line {lineno}: vertex id >= declared {n_vertices}")
        max_id = max(max_id, u, v)
        us.append(u)
        vs.append(v)
    n = n_vertices if n_vertices is not None else max_id + 1
    return from_pairs(max(n, 0), np.array(us, dtype=np.int64), np.array(vs, dtype=np.int64))


def serialize_edge_list(g: Graph, sink: IO[str]) -> None:
    """Write each undirected edge once as "u v"; inverse of load_edge_list."""
    us, vs = g.undirected_edges()
    for u, v in zip(us.tolist(), vs.tolist()):
        sink.write(f"{u} {v}\n")


def save_csr(g: Graph, path: str | Path) -> None:
    """Binary cache: magic "CSR1", little-endian u64 n and m, offsets, targets."""
    with open(path, "wb") as f:
        f.write(_CSR_MAGIC)
        f.write(struct.pack("<QQ", g.n_vertices, g.n_targets))
        f.write(g.offsets.astype("<u8").tobytes())
        f.write(g.targets.astype("<u8").tobytes())


def load_csr(path: str | Path) -> Graph:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CSR_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_CSR_MAGIC!r}")
        n, m = struct.unpack("<QQ", f.read(16))
        offsets = np.frombuffer(f.read(8 * (n + 1)), dtype="<u8").astype(np.int64)
        targets = np.frombuffer(f.read(8 * m), dtype="<u8").astype(np.int64)
    return Graph(int(n), offsets, targets)


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model parameters (blocks of consecutive vertex ids)."""

    block_sizes: tuple[int, ...]
    p_in: float
    p_out: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if any(b < 1 for b in self.block_sizes):
            raise ValueError("block sizes must be >= 1")
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ValueError("need 0 <= p_out <= p_in <= 1")

    @property
    def n_vertices(self) -> int:
        return sum(self.block_sizes)


def generate_sbm(spec: SbmSpec) -> Graph:
    """Sample each unordered pair once with the intra/inter probability.

    Acceptance of pair (u, v) depends only on (seed, u, v), so the graph is a
    pure function of its spec.
    """
    if not spec.block_sizes:
        raise ValueError("empty SBM spec: no blocks")
    n = spec.n_vertices
    block_of = np.repeat(np.arange(len(spec.block_sizes), dtype=np.int64),
                         np.array(spec.block_sizes, dtype=np.int64))
    mode_in, thr_in = kernels.probability_threshold(spec.p_in)
    mode_out, thr_out = kernels.probability_threshold(spec.p_out)
    us, vs = kernels.sbm_edges(block_of, mode_in, thr_in, mode_out, thr_out,
                               chain(spec.seed, 0x5B))
    return from_pairs(n, us, vs)


@dataclass(frozen=True)
class PartitionMap:
    """vertex id -> home server id in [0, n_servers)."""

    home: np.ndarray
    n_servers: int

    def __post_init__(self):
        object.__setattr__(self, "home", np.ascontiguousarray(self.home, dtype=np.int64))
        if self.n_servers < 1:
            raise ValueError("n_servers must be >= 1")
        if len(self.home) and (self.home.min() < 0 or self.home.max() >= self.n_servers):
            raise ValueError("home id out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.home)

    def part_sizes(self) -> np.ndarray:
        return np.bincount(self.home, minlength=self.n_servers)

    def relabeled(self, perm: Iterable[int]) -> "PartitionMap":
        """Apply a permutation of server ids (for invariance checks)."""
        lut = np.asarray(list(perm), dtype=np.int64)
        return PartitionMap(lut[self.home], self.n_servers)


def save_partition(p: PartitionMap, path: str | Path) -> None:
    """ASCII lines "vertex_id server_id"."""
    with open(path, "w", encoding="ascii") as f:
        for v, s in enumerate(p.home.tolist()):
            f.write(f"{v} {s}\n")


def load_partition(path: str | Path, n_servers: int | None = None) -> PartitionMap:
    pairs = {}
    with open(path, "r", encoding="ascii") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise EdgeListError(f"line {lineno}: expected 'vertex server'")
            pairs[int(parts[0])] = int(parts[1])
    n = max(pairs) + 1 if pairs else 0
    if len(pairs) != n:
        raise ValueError("partition file must cover vertices 0..n-1 exactly")
    home = np.array([pairs[v] for v in range(n)], dtype=np.int64)
    servers = n_servers if n_servers is not None else int(home.max()) + 1 if n else 1
    return PartitionMap(home, servers)


def partition_hash(g: Graph, n_servers: int, seed: int) -> PartitionMap:
    """Random hash homes: home(v) = mix64(seed, v) mod S (no locality)."""
    if n_servers < 1:
        raise ValueError("n_servers must be >= 1")
    h = hash_vec(chain(seed, 0xA7), np.arange(g.n_vertices, dtype=np.int64))
    return PartitionMap((h % np.uint64(n_servers)).astype(np.int64), n_servers)


def partition_greedy_locality(g: Graph, n_servers: int, slack: float = 0.0,
                              seed: int = 0) -> PartitionMap:
    """BFS region growing into size-capped parts.

    Seeds are the unassigned vertex of highest degree (ties to the lowest
    id); a part grows by BFS until it holds ceil((1+slack)*n/S) vertices,
    re-seeding whenever its component is exhausted, then the next part
    opens.  Leftovers (none in practice) round-robin.  The seed argument is
    unused: growth order is fully fixed by the tie-break rule.
    """
    if n_servers < 1:
        raise ValueError("n_servers must be >= 1")
    if slack < 0:
        raise ValueError("slack must be >= 0")
    n = g.n_vertices
    cap = max(1, int(np.ceil((1.0 + slack) * n / n_servers)))
    home = np.full(n, -1, dtype=np.int64)
    degs = g.degrees()
    # Vertices in degree-descending, id-ascending order feed the seed cursor.
    seed_order = np.lexsort((np.arange(n), -degs))
    cursor = 0
    assigned = 0
    for part in range(n_servers):
        size = 0
        queue: list[int] = []
        qi = 0
        while size < cap and assigned < n:
            if qi >= len(queue):
                while cursor < n and home[seed_order[cursor]] != -1:
                    cursor += 1
                if cursor >= n:
                    break
                s = int(seed_order[cursor])
                home[s] = part
                queue = [s]
                qi = 0
                size += 1
                assigned += 1
                qi += 1
                frontier_src = s
            else:
                frontier_src = queue[qi]
                qi += 1
            for nb in g.neighbors(frontier_src).tolist():
                if home[nb] == -1 and size < cap:
                    home[nb] = part
                    queue.append(nb)
                    size += 1
                    assigned += 1
        if assigned >= n:
            break
    leftovers = np.flatnonzero(home == -1)
    if len(leftovers):
        home[leftovers] = np.arange(len(leftovers), dtype=np.int64) % n_servers
    return PartitionMap(home, n_servers)


def edge_cut(g: Graph, p: PartitionMap) -> float:
    """Fraction of undirected edges whose endpoints live on different servers."""
    if p.n_vertices != g.n_vertices:
        raise ValueError("partition does not cover the graph")
    us, vs = g.undirected_edges()
    proper = us < vs  # self-loops are never cut; keep them out of both counts
    us, vs = us[proper], vs[proper]
    if len(us) == 0:
        return 0.0
    return float(np.count_nonzero(p.home[us] != p.home[vs]) / len(us))
