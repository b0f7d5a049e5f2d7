"""Locality statistics, strategy comparison, and CSV emission."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import IO, Sequence

import numpy as np

from .config import STRATEGIES, RunConfig
from .engine import (EpochMetrics, SimWorld, build_world, epoch_batches,
                     run_strategy, sample_batch_micrographs)
from .featstore import (FEATURE, GRADIENT, INTERMEDIATE, MODEL, TOPOLOGY)
from .graph import PartitionMap
from .sampler import Micrograph, Subgraph, build_subgraph

RESULT_HEADER = ("epoch,strategy,sim_seconds,steps,feature_bytes,model_bytes,"
                 "gradient_bytes,intermediate_bytes,topology_bytes,miss_rate,"
                 "alpha,imbalance")


def r_micro(m: Micrograph, p: PartitionMap, include_root: bool = True) -> float:
    """Fraction of the micrograph's vertices homed with its root.

    The root counts itself by default; include_root=False reports the
    non-root numerator for sensitivity.
    """
    root_home = p.home[m.root]
    co = int(np.count_nonzero(p.home[m.vertices] == root_home))
    if not include_root:
        co -= 1
    return co / m.vertex_count


def r_sub(sg: Subgraph, p: PartitionMap, include_root: bool = True) -> float:
    """Mean over roots of the fraction of subgraph vertices homed with that root."""
    if len(sg.roots) == 0:
        raise ValueError("subgraph has no roots")
    union = sg.unique_vertices
    homes = p.home[union]
    total = len(union)
    ratios = []
    for r in sg.roots:
        co = int(np.count_nonzero(homes == p.home[r]))
        if not include_root:
            co -= 1
        ratios.append(co / total)
    return float(np.mean(ratios))


@dataclass(frozen=True)
class LocalityRow:
    n_servers: int
    n_layers: int
    mode: str
    partitioner: str
    r_micro_mean: float
    r_sub_mean: float
    samples: int


def locality_report(world_cfg: RunConfig, partitioners: Sequence[str],
                    modes: Sequence[str], server_counts: Sequence[int],
                    layer_counts: Sequence[int], iterations: int = 3,
                    batch: int | None = None) -> list[LocalityRow]:
    """Monte Carlo locality ratios over sampled batches, one row per config.

    Rows come out in config order (partitioner, mode, S, L) regardless of
    execution order; everything is a pure function of the seed.
    """
    rows = []
    batch = batch or world_cfg.batch
    for partitioner in partitioners:
        for mode in modes:
            for S in server_counts:
                for L in layer_counts:
                    cfg = replace(world_cfg, partitioner=partitioner, mode=mode,
                                  servers=S, layers=L,
                                  fanout=(world_cfg.fanout[0],) * L,
                                  batch=batch)
                    rows.append(_locality_row(cfg, iterations))
    return rows


def _locality_row(cfg: RunConfig, iterations: int) -> LocalityRow:
    world = build_world(cfg)
    micro_vals: list[float] = []
    sub_vals: list[float] = []
    count = 0
    for epoch in range(iterations):
        batches = epoch_batches(world, epoch)[0]
        for it_roots in batches:
            if len(it_roots) == 0:
                continue
            micros = sample_batch_micrographs(world, it_roots, epoch, 0)
            members = [micros[int(r)] for r in it_roots]
            sg = build_subgraph(members)
            micro_vals.extend(r_micro(m, world.partition) for m in members)
            sub_vals.append(r_sub(sg, world.partition))
            count += len(members)
    return LocalityRow(cfg.servers, cfg.layers, cfg.mode, cfg.partitioner,
                       float(np.mean(micro_vals)), float(np.mean(sub_vals)), count)


LOCALITY_HEADER = "servers,layers,mode,partitioner,r_micro,r_sub,samples"


def write_locality_csv(rows: Sequence[LocalityRow], sink: IO[str]) -> None:
    sink.write(LOCALITY_HEADER + "\n")
    for r in rows:
        sink.write(f"{r.n_servers},{r.n_layers},{r.mode},{r.partitioner},"
                   f"{r.r_micro_mean!r},{r.r_sub_mean!r},{r.samples}\n")


def read_locality_csv(source: IO[str]) -> list[LocalityRow]:
    reader = csv.reader(source)
    header = next(reader)
    assert ",".join(header) == LOCALITY_HEADER
    return [LocalityRow(int(a), int(b), c, d, float(e), float(f), int(g))
            for a, b, c, d, e, f, g in reader]


def _num(x: float) -> str:
    # repr round-trips floats exactly; integers print without a trailing .0
    if isinstance(x, float) and x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


def metrics_rows(metrics: Sequence[EpochMetrics]) -> list[str]:
    rows = []
    for m in metrics:
        b = m.bytes_by_category
        rows.append(",".join([
            str(m.epoch), m.strategy, _num(m.sim_seconds), str(m.steps),
            _num(b[FEATURE]), _num(b[MODEL]), _num(b[GRADIENT]),
            _num(b[INTERMEDIATE]), _num(b[TOPOLOGY]),
            _num(m.miss_rate), _num(m.alpha), _num(m.imbalance),
        ]))
    return rows


def write_results_csv(metrics: Sequence[EpochMetrics], sink: IO[str]) -> None:
    sink.write(RESULT_HEADER + "\n")
    for row in metrics_rows(metrics):
        sink.write(row + "\n")


def read_results_csv(source: IO[str]) -> list[dict]:
    reader = csv.DictReader(source)
    out = []
    for rec in reader:
        parsed = dict(rec)
        for key in ("sim_seconds", "feature_bytes", "model_bytes", "gradient_bytes",
                    "intermediate_bytes", "topology_bytes", "miss_rate", "alpha",
                    "imbalance"):
            parsed[key] = float(rec[key])
        parsed["epoch"] = int(rec["epoch"])
        parsed["steps"] = int(rec["steps"])
        out.append(parsed)
    return out


def compare_strategies(cfg: RunConfig) -> list[EpochMetrics]:
    """Run every strategy variant under identical seeds; rows in fixed order."""
    out: list[EpochMetrics] = []
    for strategy in STRATEGIES:
        out.extend(run_strategy(cfg.with_strategy(strategy)))
    return out


def compare_csv(cfg: RunConfig) -> str:
    buf = io.StringIO()
    write_results_csv(compare_strategies(cfg), buf)
    return buf.getvalue()
