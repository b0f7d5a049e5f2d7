"""Simulated N-server cluster.

One logical model per server, trained over explicit time steps.  Strategies:

* model-centric: models stay home, remote features are fetched (the
  data-parallel baseline).
* naive: the whole-subgraph model walks every server, dragging partial
  aggregation state and topology with it.
* micrograph: roots regroup by home server, models migrate between columns
  of the trace table, gradients accumulate and sync at iteration end.
  Optional feature pre-gathering and trace-table merging bolt on top.
* locality-optimized: redistributed micrographs are trained by the local
  model with no migration (saves traffic, skews batch composition).

Simulated time comes from an explicit cost model; wall clock never matters.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import (SEED_BATCHES, SEED_FEATURES, SEED_GRAPH, SEED_LABELS,
                     SEED_MERGE, SEED_MODEL, SEED_PARTITION, SEED_SAMPLER,
                     RunConfig)
from .errors import ConfigError, InvariantViolation
from .featstore import (BYTES_PER_ELEM, FEATURE, GRADIENT, INTERMEDIATE,
                        MODEL, TOPOLOGY, CommLedger, FeatureStore, FetchStats,
                        StagedFeatures, execute_pregather, init_features,
                        plan_pregather)
from .graph import (Graph, PartitionMap, SbmSpec, generate_sbm, load_csr,
                    load_edge_list, load_partition, partition_greedy_locality,
                    partition_hash)
from .model import (GradAccumulator, Gradients, LabelOracle, ModelState,
                    accumulate, build_plan, forward, init_model,
                    loss_and_backward, sync_and_update)
from .rng import chain, hash_vec, keyed_shuffle
from .sampler import (Micrograph, MiniBatchPlan, SamplerConfig, load_imbalance,
                      redistribute_roots, sample_micrograph, stream_key)

TOPOLOGY_BYTES_PER_EDGE = 8


# --------------------------------------------------------------------------
# cost model and per-step accounting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    bandwidth: float = math.inf   # bytes/second per link
    latency: float = 0.0          # seconds per message
    sync_overhead: float = 0.0    # seconds per time step
    kernel_launch: float = 0.0    # seconds per micrograph-batch launch
    compute_rate: float = 0.0     # seconds per (vertex * dim) processed

    def __post_init__(self):
        for name in ("latency", "sync_overhead", "kernel_launch", "compute_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0 (use inf for free links)")


@dataclass
class ServerWork:
    """One server's aggregates for one time step (comm charged at receiver)."""

    messages: int = 0
    bytes: float = 0.0
    launches: int = 0
    work_units: float = 0.0

    def add_comm(self, nbytes: float, messages: int) -> None:
        self.bytes += nbytes
        self.messages += messages

    def seconds(self, cm: CostModel) -> float:
        compute = cm.kernel_launch * self.launches + cm.compute_rate * self.work_units
        comm = self.messages * cm.latency + self.bytes / cm.bandwidth
        return compute + comm


def simulated_step_time(works: Sequence[ServerWork], cm: CostModel) -> float:
    """max over servers of (compute + comm), plus the per-step sync overhead."""
    peak = max((w.seconds(cm) for w in works), default=0.0)
    return peak + cm.sync_overhead


def migration_target(d: int, t: int, n_servers: int) -> int:
    """Server hosting model d at time step t: (d + t) mod N."""
    if not 0 <= d < n_servers:
        raise ValueError(f"model id {d} out of range for {n_servers} servers")
    return (d + t) % n_servers


# --------------------------------------------------------------------------
# trace table
# --------------------------------------------------------------------------

@dataclass
class TraceTable:
    """Columns of model -> server assignments plus per-cell root counts.

    server_of[d, j] is where model d runs during column j; every column is a
    bijection.  root_counts is working data, refreshed per iteration.
    removed records the live-position of each deleted column, in deletion
    order, so per-root assignments can be replayed exactly.
    """

    server_of: np.ndarray
    root_counts: np.ndarray
    removed: tuple[int, ...] = ()

    @classmethod
    def initial(cls, n_models: int) -> "TraceTable":
        d = np.arange(n_models, dtype=np.int64)[:, None]
        t = np.arange(n_models, dtype=np.int64)[None, :]
        return cls((d + t) % n_models, np.zeros((n_models, n_models), dtype=np.int64))

    @property
    def n_models(self) -> int:
        return self.server_of.shape[0]

    @property
    def n_columns(self) -> int:
        return self.server_of.shape[1]

    def model_at(self, server: int, col: int) -> int:
        return int(np.flatnonzero(self.server_of[:, col] == server)[0])

    def validate(self) -> None:
        n = self.n_models
        for j in range(self.n_columns):
            if not np.array_equal(np.sort(self.server_of[:, j]), np.arange(n)):
                raise InvariantViolation(f"column {j} is not a bijection")
        if self.root_counts.shape != self.server_of.shape:
            raise InvariantViolation("root_counts shape mismatch")
        if np.any(self.root_counts < 0):
            raise InvariantViolation("negative root count")

    def copy(self) -> "TraceTable":
        return TraceTable(self.server_of.copy(), self.root_counts.copy(), self.removed)


def find_fewest_column(tt: TraceTable) -> int | None:
    """Column with the smallest total root count (ties to the lowest index);
    None when fewer than two columns remain."""
    if tt.n_columns < 2:
        return None
    return int(np.argmin(tt.root_counts.sum(axis=0)))


def even_split(count: int, parts: int) -> list[int]:
    """Split count as evenly as possible; the remainder goes to low indices."""
    base, rem = divmod(count, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def delete_column_and_redistribute(tt: TraceTable, col: int,
                                   stream_key: int = 0) -> TraceTable:
    """Drop a column, spreading each model's displaced roots evenly over its
    surviving columns (row sums conserved, surviving bijections untouched).

    Counts move here; per-root membership is randomized by the per-iteration
    stream key when cells are dealt (assign_cell_roots).
    """
    if tt.n_columns < 2:
        raise ValueError("cannot remove the last column")
    keep = [j for j in range(tt.n_columns) if j != col]
    counts = tt.root_counts[:, keep].copy()
    for d in range(tt.n_models):
        moved = int(tt.root_counts[d, col])
        for i, extra in enumerate(even_split(moved, len(keep))):
            counts[d, i] += extra
    return TraceTable(tt.server_of[:, keep].copy(), counts, tt.removed + (col,))


def assign_cell_roots(tt: TraceTable, plan: MiniBatchPlan,
                      key: int) -> list[list[np.ndarray]]:
    """Per-cell root lists for one iteration, replaying the merge history.

    Starts from the initial N-column placement (model d trains its roots
    homed at server (d+t)%N during column t) and re-applies each recorded
    removal, shuffling the displaced roots with a key derived from
    (key, removal ordinal, model).
    """
    n = tt.n_models
    cells: list[list[np.ndarray]] = []
    for d in range(n):
        cells.append([plan.groups[d][(d + t) % n] for t in range(n)])
    for ordinal, pos in enumerate(tt.removed):
        for d in range(n):
            row = cells[d]
            moved = row.pop(pos)
            shuffled = keyed_shuffle(chain(key, ordinal, d), moved)
            sizes = even_split(len(shuffled), len(row))
            start = 0
            for i, size in enumerate(sizes):
                if size:
                    row[i] = np.concatenate([row[i], shuffled[start:start + size]])
                start += size
    return cells


def cell_counts(cells: list[list[np.ndarray]]) -> np.ndarray:
    return np.array([[len(c) for c in row] for row in cells], dtype=np.int64)


# --------------------------------------------------------------------------
# world construction
# --------------------------------------------------------------------------

@dataclass
class SimWorld:
    cfg: RunConfig
    graph: Graph
    partition: PartitionMap
    fs: FeatureStore
    labels: LabelOracle
    scfg: SamplerConfig
    cm: CostModel

    @property
    def n_servers(self) -> int:
        return self.cfg.servers

    @property
    def n_vertices(self) -> int:
        return self.graph.n_vertices


def build_world(cfg: RunConfig) -> SimWorld:
    if cfg.graph == "sbm":
        graph = generate_sbm(SbmSpec(cfg.blocks, cfg.p_in, cfg.p_out,
                                     chain(cfg.seed, SEED_GRAPH)))
    elif cfg.graph.endswith(".csr"):
        graph = load_csr(cfg.graph)
    else:
        graph = load_edge_list(cfg.graph)
    if cfg.partitioner == "hash":
        part = partition_hash(graph, cfg.servers, chain(cfg.seed, SEED_PARTITION))
    elif cfg.partitioner == "greedy":
        part = partition_greedy_locality(graph, cfg.servers, cfg.slack,
                                         chain(cfg.seed, SEED_PARTITION))
    else:
        part = load_partition(cfg.partition_file, cfg.servers)
        if part.n_vertices != graph.n_vertices:
            raise ConfigError("partition file does not cover the graph")
    fs = init_features(part, cfg.dim, "generated", seed=chain(cfg.seed, SEED_FEATURES))
    labels = LabelOracle(cfg.classes, chain(cfg.seed, SEED_LABELS))
    scfg = SamplerConfig(cfg.layers, cfg.fanout, cfg.mode,
                         chain(cfg.seed, SEED_SAMPLER))
    cm = CostModel(cfg.bandwidth, cfg.latency, cfg.sync_overhead,
                   cfg.kernel_launch, cfg.compute_rate)
    return SimWorld(cfg, graph, part, fs, labels, scfg, cm)


def fresh_models(world: SimWorld) -> list[ModelState]:
    proto = init_model(world.cfg.arch, world.cfg.dim, world.cfg.hidden,
                       world.cfg.layers, world.cfg.classes,
                       chain(world.cfg.seed, SEED_MODEL))
    return [proto.copy() for _ in range(world.n_servers)]


def epoch_batches(world: SimWorld, epoch: int) -> list[list[np.ndarray]]:
    """Disjoint per-model mini-batches: chunks of a keyed epoch permutation."""
    n = world.n_vertices
    N = world.n_servers
    B = world.cfg.batch
    keys = hash_vec(chain(world.cfg.seed, SEED_BATCHES, epoch),
                    np.arange(n, dtype=np.int64))
    perm = np.argsort(keys, kind="stable").astype(np.int64)
    iters = max(1, n // (N * B))
    if world.cfg.iterations:
        iters = min(iters, world.cfg.iterations)
    out = []
    for it in range(iters):
        batch = []
        for d in range(N):
            lo = min((it * N + d) * B, n)
            hi = min(lo + B, n)
            batch.append(perm[lo:hi])
        out.append(batch)
    return out


def sample_batch_micrographs(world: SimWorld, roots: np.ndarray, epoch: int,
                             iteration: int) -> dict[int, Micrograph]:
    key_seed = world.scfg.seed
    return {int(r): sample_micrograph(world.graph, int(r), world.scfg,
                                      stream_key(key_seed, epoch, iteration, int(r)))
            for r in roots}


# --------------------------------------------------------------------------
# per-epoch metrics
# --------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    strategy: str
    sim_seconds: float
    steps: int
    iterations: int
    bytes_by_category: dict[str, float]
    miss_rate: float
    alpha: float
    imbalance: float
    busy_seconds: np.ndarray
    staged_bytes: float
    ledger: CommLedger
    trained: list[list[np.ndarray]]  # per iteration, per model, sorted roots
    composition_diverged: bool
    n_columns: int

    def total_bytes(self) -> float:
        return sum(self.bytes_by_category.values())


def alpha_ratio(metrics: EpochMetrics, param_bytes: int) -> float:
    """Remote-fetched training-data bytes per iteration over parameter bytes."""
    if param_bytes <= 0:
        raise ValueError("model must have parameters")
    data = metrics.bytes_by_category[FEATURE] + metrics.bytes_by_category[TOPOLOGY]
    return data / metrics.iterations / param_bytes


class _EpochCollector:
    def __init__(self, world: SimWorld, epoch: int, strategy: str):
        self.world = world
        self.epoch = epoch
        self.strategy = strategy
        self.ledger = CommLedger()
        self.stats = FetchStats()
        self.sim_seconds = 0.0
        self.steps = 0
        self.busy = np.zeros(world.n_servers, dtype=np.float64)
        self.imbalances: list[float] = []
        self.staged_bytes = 0.0
        self.trained: list[list[np.ndarray]] = []
        self.n_columns = world.n_servers

    def step(self, works: Sequence[ServerWork]) -> None:
        cm = self.world.cm
        self.sim_seconds += simulated_step_time(works, cm)
        for s, w in enumerate(works):
            self.busy[s] += w.seconds(cm)
        self.steps += 1

    def merge_cell(self, delta: CommLedger, stats: FetchStats) -> None:
        self.ledger.merge(delta)
        self.stats.merge(stats)

    def final_sync(self, models, accs, batch_total) -> None:
        sync_and_update(models, accs, batch_total, self.world.cfg.lr, self.ledger)
        n = self.world.n_servers
        if n > 1:
            per_link = 2.0 * (n - 1) / n * models[0].param_bytes
            t = self.world.cm.latency * 2 * (n - 1) + per_link / self.world.cm.bandwidth
            self.sim_seconds += t
            self.busy += t
        for acc in accs:
            acc.reset()

    def finish(self, batches_per_iter: list[list[np.ndarray]],
               param_bytes: int) -> EpochMetrics:
        diverged = False
        for trained, batches in zip(self.trained, batches_per_iter):
            for got, want in zip(trained, batches):
                if not np.array_equal(got, np.sort(np.asarray(want))):
                    diverged = True
        m = EpochMetrics(
            epoch=self.epoch,
            strategy=self.strategy,
            sim_seconds=self.sim_seconds,
            steps=self.steps,
            iterations=len(batches_per_iter),
            bytes_by_category=self.ledger.bytes_by_category(),
            miss_rate=self.stats.miss_rate,
            alpha=0.0,
            imbalance=float(np.mean(self.imbalances)) if self.imbalances else 0.0,
            busy_seconds=self.busy,
            staged_bytes=self.staged_bytes,
            ledger=self.ledger,
            trained=self.trained,
            composition_diverged=diverged,
            n_columns=self.n_columns,
        )
        m.alpha = alpha_ratio(m, param_bytes)
        return m


# --------------------------------------------------------------------------
# cell execution (one server, one time step)
# --------------------------------------------------------------------------

@dataclass
class CellResult:
    server: int
    model_id: int
    ledger: CommLedger
    stats: FetchStats
    work: ServerWork
    grads: Gradients | None
    count: int
    loss: float


def run_cell(world: SimWorld, model: ModelState, model_id: int,
             micros: Sequence[Micrograph], server: int,
             staged: StagedFeatures | None) -> CellResult:
    """Gather features for a micrograph batch and train it.

    Pure given its inputs: safe to execute per-server cells concurrently and
    merge the returned deltas in a fixed order.
    """
    ledger = CommLedger()
    stats = FetchStats()
    work = ServerWork()
    grads: Gradients | None = None
    count = 0
    loss_total = 0.0
    if micros:
        needs = np.unique(np.concatenate([m.vertices for m in micros]))
        if staged is None:
            rows = world.fs.fetch(server, needs, ledger, stats)
        else:
            rows = _rows_via_staging(world.fs, server, needs, staged, stats)
        work.launches += 1
        for m in micros:
            pos = np.searchsorted(needs, m.vertices)
            st = forward(m, rows[pos], model)
            work.work_units += m.vertex_count * world.cfg.dim
            lab = world.labels.label(m.root)
            loss, g = loss_and_backward(st, lab, model)
            loss_total += loss
            if grads is None:
                grads = g
            else:
                grads.add(g)
            count += 1
        for (_, _, _), (b, msgs) in ledger.counters.items():
            work.add_comm(b, msgs)
    return CellResult(server, model_id, ledger, stats, work, grads, count, loss_total)


def _rows_via_staging(fs: FeatureStore, server: int, needs: np.ndarray,
                      staged: StagedFeatures, stats: FetchStats) -> np.ndarray:
    homes = fs.partition.home[needs]
    local_mask = homes == server
    out = np.empty((len(needs), fs.dim), dtype=np.float32)
    if local_mask.any():
        out[local_mask] = fs.rows(needs[local_mask])
    if (~local_mask).any():
        out[~local_mask] = staged.lookup(needs[~local_mask])
    stats.requested += len(needs)
    stats.local += int(local_mask.sum())
    stats.staged += int((~local_mask).sum())
    return out


def _map_servers(parallel: bool, fn: Callable, calls: list[tuple]) -> list:
    if parallel and len(calls) > 1:
        with ThreadPoolExecutor(max_workers=len(calls)) as pool:
            futures = [pool.submit(fn, *args) for args in calls]
            return [f.result() for f in futures]
    return [fn(*args) for args in calls]


# --------------------------------------------------------------------------
# strategies
# --------------------------------------------------------------------------

def run_model_centric(cfg: RunConfig) -> list[EpochMetrics]:
    """Stationary models; each fetches its whole (deduplicated) subgraph."""
    world = build_world(cfg)
    models = fresh_models(world)
    return [_model_centric_epoch(world, models, e) for e in range(cfg.epochs)]


def _model_centric_epoch(world, models, epoch) -> EpochMetrics:
    col = _EpochCollector(world, epoch, "model-centric")
    col.n_columns = 1
    accs = [GradAccumulator.for_model(d, m) for d, m in enumerate(models)]
    batches_per_iter = epoch_batches(world, epoch)
    for it, batches in enumerate(batches_per_iter):
        plan = redistribute_roots(batches, world.partition)
        col.imbalances.append(load_imbalance(plan))
        micros = sample_batch_micrographs(
            world, np.concatenate(batches) if batches else np.empty(0, np.int64),
            epoch, it)
        calls = [(world, models[d], d, [micros[int(r)] for r in batches[d]], d, None)
                 for d in range(world.n_servers)]
        results = _map_servers(world.cfg.parallel, run_cell, calls)
        for res in results:
            col.merge_cell(res.ledger, res.stats)
            if res.grads is not None:
                accs[res.model_id].grads.add(res.grads)
                accs[res.model_id].count += res.count
        col.step([r.work for r in results])
        col.trained.append([np.sort(np.asarray(b)) for b in batches])
        col.final_sync(models, accs, sum(len(b) for b in batches))
    return col.finish(batches_per_iter, models[0].param_bytes)


def run_locality_optimized(cfg: RunConfig) -> list[EpochMetrics]:
    """Redistributed micrographs trained in place by the local model."""
    world = build_world(cfg)
    models = fresh_models(world)
    out = []
    for epoch in range(cfg.epochs):
        col = _EpochCollector(world, epoch, "locality-optimized")
        col.n_columns = 1
        accs = [GradAccumulator.for_model(d, m) for d, m in enumerate(models)]
        batches_per_iter = epoch_batches(world, epoch)
        for it, batches in enumerate(batches_per_iter):
            plan = redistribute_roots(batches, world.partition)
            col.imbalances.append(load_imbalance(plan))
            micros = sample_batch_micrographs(
                world, np.concatenate(batches) if batches else np.empty(0, np.int64),
                epoch, it)
            local_roots = []
            for s in range(world.n_servers):
                grouped = [plan.groups[d][s] for d in range(world.n_servers)]
                local_roots.append(np.concatenate(grouped) if grouped else
                                   np.empty(0, dtype=np.int64))
            calls = [(world, models[s], s,
                      [micros[int(r)] for r in local_roots[s]], s, None)
                     for s in range(world.n_servers)]
            results = _map_servers(world.cfg.parallel, run_cell, calls)
            for res in results:
                col.merge_cell(res.ledger, res.stats)
                if res.grads is not None:
                    accs[res.model_id].grads.add(res.grads)
                    accs[res.model_id].count += res.count
            col.step([r.work for r in results])
            col.trained.append([np.sort(r) for r in local_roots])
            col.final_sync(models, accs, sum(len(b) for b in batches))
        out.append(col.finish(batches_per_iter, models[0].param_bytes))
    return out


def run_micrograph(cfg: RunConfig, pregather: bool = False,
                   merge: bool = False) -> list[EpochMetrics]:
    """Feature-centric training: models migrate across trace-table columns."""
    name = "micrograph" + ("+pg" if pregather else "") + ("+merge" if merge else "")
    world = build_world(cfg)
    models = fresh_models(world)
    if not merge:
        tt = TraceTable.initial(world.n_servers)
        return [_micrograph_epoch(world, models, tt, e, pregather, name)
                for e in range(cfg.epochs)]
    metrics, _, _ = merge_controller(cfg, world=world, models=models,
                                     pregather=pregather, name=name)
    return metrics


def _micrograph_epoch(world, models, tt: TraceTable, epoch: int,
                      pregather: bool, name: str) -> EpochMetrics:
    col = _EpochCollector(world, epoch, name)
    col.n_columns = tt.n_columns
    accs = [GradAccumulator.for_model(d, m) for d, m in enumerate(models)]
    batches_per_iter = epoch_batches(world, epoch)
    S = world.n_servers
    for it, batches in enumerate(batches_per_iter):
        plan = redistribute_roots(batches, world.partition)
        col.imbalances.append(load_imbalance(plan))
        all_roots = np.concatenate(batches) if batches else np.empty(0, np.int64)
        micros = sample_batch_micrographs(world, all_roots, epoch, it)
        cells = assign_cell_roots(tt, plan, chain(world.cfg.seed, SEED_MERGE, epoch, it))
        tt.root_counts = cell_counts(cells)
        tt.validate()
        pending = [(0.0, 0) for _ in range(S)]
        staged: list[StagedFeatures | None] = [None] * S
        if pregather:
            for s in range(S):
                assigned = []
                for j in range(tt.n_columns):
                    d = tt.model_at(s, j)
                    assigned.extend(micros[int(r)] for r in cells[d][j])
                pg_plan = plan_pregather(s, assigned, world.partition)
                delta = CommLedger()
                st = FetchStats()
                staged[s] = execute_pregather(pg_plan, world.fs, delta, st)
                col.merge_cell(delta, st)
                col.staged_bytes += staged[s].staged_bytes
                b, msgs = delta.total_bytes(), sum(m for _, m in delta.counters.values())
                pending[s] = (pending[s][0] + b, pending[s][1] + msgs)
        for j in range(tt.n_columns):
            calls = []
            for s in range(S):
                d = tt.model_at(s, j)
                cell_micros = [micros[int(r)] for r in cells[d][j]]
                calls.append((world, models[d], d, cell_micros, s, staged[s]))
            results = _map_servers(world.cfg.parallel, run_cell, calls)
            works = []
            for s, res in enumerate(results):
                col.merge_cell(res.ledger, res.stats)
                if res.grads is not None:
                    accs[res.model_id].grads.add(res.grads)
                    accs[res.model_id].count += res.count
                res.work.add_comm(*pending[s])
                works.append(res.work)
            col.step(works)
            pending = [(0.0, 0) for _ in range(S)]
            if j + 1 < tt.n_columns:
                # Every model migrates with its params and accumulator.
                for d in range(tt.n_models):
                    src = int(tt.server_of[d, j])
                    dst = int(tt.server_of[d, j + 1])
                    pb = models[d].param_bytes
                    col.ledger.add(src, dst, MODEL, pb, 1)
                    col.ledger.add(src, dst, GRADIENT, pb, 1)
                    pending[dst] = (pending[dst][0] + 2 * pb, pending[dst][1] + 2)
        col.trained.append([np.sort(np.concatenate(cells[d]) if cells[d] else
                                    np.empty(0, dtype=np.int64))
                            for d in range(tt.n_models)])
        col.final_sync(models, accs, sum(len(b) for b in batches))
    return col.finish(batches_per_iter, models[0].param_bytes)


def run_naive_feature_centric(cfg: RunConfig) -> list[EpochMetrics]:
    """Whole-subgraph model migration with intermediate-state shipping."""
    world = build_world(cfg)
    models = fresh_models(world)
    return [_naive_epoch(world, models, e) for e in range(cfg.epochs)]


def _itinerary(d: int, S: int) -> list[int]:
    if S == 1:
        return [d]
    return [d] + [s for s in range(S) if s != d] + [d]


def _naive_epoch(world, models, epoch) -> EpochMetrics:
    col = _EpochCollector(world, epoch, "naive")
    S = world.n_servers
    col.n_columns = S + 1 if S > 1 else 1
    accs = [GradAccumulator.for_model(d, m) for d, m in enumerate(models)]
    batches_per_iter = epoch_batches(world, epoch)
    for it, batches in enumerate(batches_per_iter):
        plan = redistribute_roots(batches, world.partition)
        col.imbalances.append(load_imbalance(plan))
        all_roots = np.concatenate(batches) if batches else np.empty(0, np.int64)
        micro_map = sample_batch_micrographs(world, all_roots, epoch, it)
        per_model = [[micro_map[int(r)] for r in batches[d]] for d in range(S)]
        routes = [_itinerary(d, S) for d in range(S)]
        positions = len(routes[0])
        pending = [(0.0, 0) for _ in range(S)]
        walkers = [_NaiveWalker(world, per_model[d]) for d in range(S)]
        for t in range(positions):
            works = [ServerWork() for _ in range(S)]
            for d in range(S):
                here = routes[d][t]
                gathered = walkers[d].arrive(here)
                if gathered or t == positions - 1:
                    works[here].launches += 1
                works[here].work_units += gathered * world.cfg.dim
                col.stats.requested += gathered
                col.stats.local += gathered
            for s in range(S):
                works[s].add_comm(*pending[s])
            pending = [(0.0, 0) for _ in range(S)]
            if t + 1 < positions:
                for d in range(S):
                    src, dst = routes[d][t], routes[d][t + 1]
                    state_rows, remaining_edges = walkers[d].carry_state()
                    inter = state_rows * world.cfg.hidden * BYTES_PER_ELEM
                    topo = remaining_edges * TOPOLOGY_BYTES_PER_EDGE
                    pb = models[d].param_bytes
                    col.ledger.add(src, dst, MODEL, pb, 1)
                    col.ledger.add(src, dst, INTERMEDIATE, inter, 1)
                    col.ledger.add(src, dst, TOPOLOGY, topo, 1)
                    pending[dst] = (pending[dst][0] + pb + inter + topo,
                                    pending[dst][1] + 3)
            col.step(works)
        # Training math happens at the home server once all rows are seen.
        for d in range(S):
            for m in per_model[d]:
                rows = world.fs.rows(m.vertices)
                st = forward(m, rows, models[d])
                loss, g = loss_and_backward(st, world.labels.label(m.root), models[d])
                accumulate(accs[d], g)
        col.trained.append([np.sort(np.asarray(b)) for b in batches])
        col.final_sync(models, accs, sum(len(b) for b in batches))
    return col.finish(batches_per_iter, models[0].param_bytes)


class _NaiveWalker:
    """Tracks feature availability and layer completion for one model's
    subgraph as it walks the itinerary; sizes the shipped state."""

    def __init__(self, world: SimWorld, micros: list[Micrograph]):
        self.world = world
        self.micros = micros
        self.plans = [build_plan(m) for m in micros]
        self.avail = [np.zeros(len(m.vertices), dtype=bool) for m in micros]
        self.computed = [[np.zeros(len(ids), dtype=bool) for ids in plan.need[1:]]
                         for plan in self.plans]
        self.visited: set[int] = set()

    def arrive(self, server: int) -> int:
        """Mark rows homed here available; returns newly gathered row count
        (summed per micrograph, matching the per-micrograph work convention)."""
        gathered = 0
        first_visit = server not in self.visited
        self.visited.add(server)
        for m, avail in zip(self.micros, self.avail):
            homes = self.world.partition.home[m.vertices]
            mask = homes == server
            if first_visit:
                gathered += int(mask.sum())
            avail |= mask
        self._advance()
        return gathered

    def _advance(self) -> None:
        for m, plan, avail, comp in zip(self.micros, self.plans, self.avail,
                                        self.computed):
            for k in range(1, m.n_layers + 1):
                if k == 1:
                    ready_prev = avail[np.searchsorted(m.vertices, plan.need[0])]
                else:
                    ready_prev = comp[k - 2]
                self_pos, dpos, spos, _ = plan.layers[k - 1]
                ok = ready_prev[self_pos].copy()
                if len(dpos):
                    # a dst is blocked while any of its pair srcs is not ready
                    blocked = np.zeros(len(ok), dtype=bool)
                    np.logical_or.at(blocked, dpos, ~ready_prev[spos])
                    ok &= ~blocked
                comp[k - 1] |= ok

    def carry_state(self) -> tuple[int, int]:
        """(state rows, remaining pair count) to ship at the next hop.

        State rows = computed activations (backward needs them) plus
        destinations whose aggregation is only partially complete.
        """
        rows = 0
        remaining = 0
        for m, plan, avail, comp in zip(self.micros, self.plans, self.avail,
                                        self.computed):
            for k in range(1, m.n_layers + 1):
                done = comp[k - 1]
                rows += int(done.sum())
                if k == 1:
                    ready_prev = avail[np.searchsorted(m.vertices, plan.need[0])]
                else:
                    ready_prev = comp[k - 2]
                self_pos, dpos, spos, _ = plan.layers[k - 1]
                partial = np.zeros(len(done), dtype=bool)
                if len(dpos):
                    np.logical_or.at(partial, dpos, ready_prev[spos])
                partial |= ready_prev[self_pos]
                rows += int((partial & ~done).sum())
                if len(dpos):
                    remaining += int((~done[dpos]).sum())
        return rows, remaining


# --------------------------------------------------------------------------
# micrograph merging controller
# --------------------------------------------------------------------------

@dataclass
class MergeEvent:
    epoch_start: int
    epochs: int
    columns: int
    avg_seconds: float
    action: str  # baseline | accepted | rejected | settled


def merge_controller(cfg: RunConfig, world: SimWorld | None = None,
                     models: list[ModelState] | None = None,
                     pregather: bool = True,
                     name: str = "micrograph+pg+merge",
                     ) -> tuple[list[EpochMetrics], TraceTable, list[MergeEvent]]:
    """Greedy column removal: measure K epochs, tentatively drop the column
    with the fewest roots, keep the drop only if the average simulated epoch
    time strictly shrinks, else revert and settle."""
    K = cfg.merge_k
    world = world or build_world(cfg)
    models = models or fresh_models(world)
    tt = TraceTable.initial(world.n_servers)
    metrics: list[EpochMetrics] = []
    history: list[MergeEvent] = []
    epoch = 0

    def run_block(table: TraceTable, count: int) -> float:
        nonlocal epoch
        times = []
        for _ in range(count):
            m = _micrograph_epoch(world, models, table, epoch, pregather, name)
            metrics.append(m)
            times.append(m.sim_seconds)
            epoch += 1
        return float(np.mean(times)) if times else 0.0

    baseline = min(K, cfg.epochs)
    old_time = run_block(tt, baseline)
    history.append(MergeEvent(0, baseline, tt.n_columns, old_time, "baseline"))
    settled = False
    while not settled and epoch + K <= cfg.epochs and tt.n_columns >= 2:
        counts = _counts_for_next_epoch(world, tt, epoch)
        probe = tt.copy()
        probe.root_counts = counts
        target = find_fewest_column(probe)
        if target is None:
            break
        tentative = delete_column_and_redistribute(tt, target)
        tentative.validate()
        start = epoch
        new_time = run_block(tentative, K)
        if new_time < old_time:
            tt = tentative
            old_time = new_time
            history.append(MergeEvent(start, K, tt.n_columns, new_time, "accepted"))
        else:
            history.append(MergeEvent(start, K, tentative.n_columns, new_time,
                                      "rejected"))
            settled = True
    if epoch < cfg.epochs:
        start = epoch
        avg = run_block(tt, cfg.epochs - epoch)
        history.append(MergeEvent(start, cfg.epochs - start, tt.n_columns, avg,
                                  "settled"))
    return metrics, tt, history


def _counts_for_next_epoch(world: SimWorld, tt: TraceTable, epoch: int) -> np.ndarray:
    """Root counts the table would see in the upcoming epoch's first
    iteration (the controller must decide before running it)."""
    batches = epoch_batches(world, epoch)[0]
    plan = redistribute_roots(batches, world.partition)
    cells = assign_cell_roots(tt, plan, chain(world.cfg.seed, SEED_MERGE, epoch, 0))
    return cell_counts(cells)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def run_strategy(cfg: RunConfig) -> list[EpochMetrics]:
    s = cfg.strategy
    if s == "model-centric":
        return run_model_centric(cfg)
    if s == "naive":
        return run_naive_feature_centric(cfg)
    if s == "locality-optimized":
        return run_locality_optimized(cfg)
    if s == "micrograph":
        return run_micrograph(cfg, pregather=False, merge=False)
    if s == "micrograph+pg":
        return run_micrograph(cfg, pregather=True, merge=False)
    if s == "micrograph+pg+merge":
        return run_micrograph(cfg, pregather=True, merge=True)
    raise ConfigError(f"unknown strategy {s!r}")
