"""k-hop sampling into micrographs, mini-batch planning, root redistribution.

A micrograph is the per-root computation graph: layers[L] = [root], and each
hop outward samples neighbors of the previous frontier.  Layer lists hold
only the sampled vertices; during computation a destination's own previous
value chains implicitly (layer 0 "activations" are raw features, so the
chain bottoms out at the vertex's feature row).

Sampling is a pure function of (graph, config, stream key), independent of
which server runs it; that predictability is what makes feature
pre-gathering possible.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from . import kernels
from .graph import Graph, PartitionMap
from .rng import chain

NODE_WISE = "node-wise"
LAYER_WISE = "layer-wise"


@dataclass(frozen=True)
class SamplerConfig:
    n_layers: int
    fanout: tuple[int, ...]
    mode: str = NODE_WISE
    seed: int = 0

    def __post_init__(self):
        fo = tuple(int(f) for f in (self.fanout if isinstance(self.fanout, (tuple, list))
                                    else (self.fanout,) * self.n_layers))
        if len(fo) == 1 and self.n_layers > 1:
            fo = fo * self.n_layers
        object.__setattr__(self, "fanout", fo)
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if len(self.fanout) != self.n_layers or any(f < 1 for f in self.fanout):
            raise ValueError("need one fanout >= 1 per layer")
        if self.mode not in (NODE_WISE, LAYER_WISE):
            raise ValueError(f"unknown sampling mode {self.mode!r}")

    def stream_key(self, epoch: int, iteration: int, root: int) -> int:
        return stream_key(self.seed, epoch, iteration, root)


def stream_key(seed: int, epoch: int, iteration: int, root: int) -> int:
    """Key for one root's draw; fixes the micrograph regardless of executor."""
    return chain(seed, epoch, iteration, root)


@dataclass(frozen=True)
class Micrograph:
    """Layered computation graph of a single root.

    pairs[k] holds (dst_idx, src_idx) arrays: dst_idx indexes layers[k+1],
    src_idx indexes layers[k].  vertices is the sorted union of all layers;
    feature rows for exactly these ids feed the forward pass.
    """

    root: int
    layers: tuple[np.ndarray, ...]
    pairs: tuple[tuple[np.ndarray, np.ndarray], ...]
    vertices: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def spec_edges(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Pairs feeding layer k (1-based, matching the layer-k dst lists)."""
        return self.pairs[k - 1]


def sample_micrograph(g: Graph, root: int, cfg: SamplerConfig, key: int) -> Micrograph:
    """Sample the micrograph of one root under the given stream key."""
    if not 0 <= root < g.n_vertices:
        raise ValueError(f"root {root} out of range for {g.n_vertices} vertices")
    L = cfg.n_layers
    layers: list[np.ndarray] = [None] * (L + 1)  # type: ignore[list-item]
    pairs: list[tuple[np.ndarray, np.ndarray]] = [None] * L  # type: ignore[list-item]
    layers[L] = np.array([root], dtype=np.int64)
    for k in range(L - 1, -1, -1):
        hop = L - k
        frontier = layers[k + 1]
        state = chain(key, hop)
        if cfg.mode == NODE_WISE:
            counts, flat = kernels.sample_frontier(
                g.offsets, g.targets, frontier, cfg.fanout[hop - 1], state)
            dst_rep = np.repeat(np.arange(len(frontier), dtype=np.int64), counts)
        else:
            dst_rep, flat = _layer_wise_hop(g, frontier, cfg.fanout[hop - 1], state)
        layers[k] = np.unique(flat)
        src_idx = np.searchsorted(layers[k], flat)
        pairs[k] = (dst_rep, src_idx)
    vertices = np.unique(np.concatenate(layers))
    return Micrograph(root, tuple(layers), tuple(pairs), vertices)


def _layer_wise_hop(g: Graph, frontier: np.ndarray, budget: int, state: int):
    """One layer-wise hop: a shared uniform draw from the union neighborhood."""
    if len(frontier) == 0:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    spans = [g.neighbors(int(v)) for v in frontier]
    flat_all = np.concatenate(spans) if spans else np.empty(0, dtype=np.int64)
    dst_all = np.repeat(np.arange(len(frontier), dtype=np.int64),
                        [len(s) for s in spans])
    candidates = np.unique(flat_all)
    selected = kernels.pick_k_smallest(candidates, budget, state)
    keep = np.isin(flat_all, selected)
    return dst_all[keep], flat_all[keep]


@dataclass(frozen=True)
class Subgraph:
    """The micrographs of one mini-batch; computation is their disjoint union."""

    members: tuple[Micrograph, ...]
    roots: np.ndarray

    @property
    def unique_vertices(self) -> np.ndarray:
        if not self.members:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([m.vertices for m in self.members]))

    @property
    def unique_vertex_count(self) -> int:
        return len(self.unique_vertices)


def build_subgraph(micros: Sequence[Micrograph]) -> Subgraph:
    roots = np.array([m.root for m in micros], dtype=np.int64)
    if len(np.unique(roots)) != len(roots):
        raise ValueError("duplicate roots in one mini-batch")
    return Subgraph(tuple(micros), roots)


@dataclass(frozen=True)
class MiniBatchPlan:
    """Original per-model batches plus their home-server regrouping.

    groups[d][s] lists the roots of model d homed at server s, in original
    batch order; the groups of one model partition its batch.
    """

    batches: tuple[np.ndarray, ...]
    groups: tuple[tuple[np.ndarray, ...], ...]
    n_servers: int

    def server_totals(self) -> np.ndarray:
        totals = np.zeros(self.n_servers, dtype=np.int64)
        for per_model in self.groups:
            for s, roots in enumerate(per_model):
                totals[s] += len(roots)
        return totals


def redistribute_roots(batches: Sequence[np.ndarray], p: PartitionMap) -> MiniBatchPlan:
    """Group every batch's roots by home server (order-preserving)."""
    groups = []
    norm = []
    for batch in batches:
        batch = np.asarray(batch, dtype=np.int64)
        norm.append(batch)
        homes = p.home[batch]
        groups.append(tuple(batch[homes == s] for s in range(p.n_servers)))
    return MiniBatchPlan(tuple(norm), tuple(groups), p.n_servers)


def load_imbalance(plan: MiniBatchPlan) -> float:
    """(max - min) / mean of per-server root totals; 0 for an empty plan."""
    totals = plan.server_totals()
    mean = totals.mean() if len(totals) else 0.0
    if mean == 0:
        return 0.0
    return float((totals.max() - totals.min()) / mean)


def dump_minibatches(sink: IO[str], epoch: int, iteration: int,
                     batches: Sequence[np.ndarray]) -> None:
    """Debug dump: one "epoch iter model root,root,..." line per model."""
    for d, batch in enumerate(batches):
        roots = ",".join(str(int(r)) for r in batch)
        sink.write(f"{epoch} {iteration} {d} {roots}\n")
