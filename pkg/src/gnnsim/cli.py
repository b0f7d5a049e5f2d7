"""Command-line driver.

Exit codes: 0 success, 2 configuration problem, 3 simulator invariant
violation.  All outputs are CSV with documented headers.
"""
from __future__ import annotations

import argparse
import sys
from contextlib import nullcontext
from pathlib import Path

from .config import RunConfig, parse_config
from .engine import merge_controller, run_strategy
from .errors import ConfigError, InvariantViolation
from .graph import generate_sbm, save_csr, save_partition, serialize_edge_list, SbmSpec
from .engine import build_world
from .metrics import (compare_strategies, locality_report, write_locality_csv,
                      write_results_csv)
from .rng import chain
from .config import SEED_GRAPH

MERGE_HEADER = "epoch_start,epochs,columns,avg_seconds,action"


def _load_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        return parse_config(args.config, overrides)
    return parse_config(iter(()), overrides)


def _open_out(path: str | None):
    if path and path != "-":
        return open(path, "w", encoding="ascii", newline="")
    return nullcontext(sys.stdout)


def _cmd_gen_graph(args) -> int:
    cfg = _load_config(args)
    if cfg.graph != "sbm":
        raise ConfigError("gen-graph only generates SBM graphs (graph=sbm)")
    g = generate_sbm(SbmSpec(cfg.blocks, cfg.p_in, cfg.p_out, chain(cfg.seed, SEED_GRAPH)))
    if args.out and args.out.endswith(".csr"):
        save_csr(g, args.out)
    else:
        with _open_out(args.out) as f:
            serialize_edge_list(g, f)
    return 0


def _cmd_partition(args) -> int:
    cfg = _load_config(args)
    world = build_world(cfg)
    if not args.out or args.out == "-":
        raise ConfigError("partition needs --out <file>")
    save_partition(world.partition, args.out)
    return 0


def _cmd_locality(args) -> int:
    cfg = _load_config(args)
    rows = locality_report(
        cfg,
        partitioners=args.partitioners.split(",") if args.partitioners else [cfg.partitioner],
        modes=args.modes.split(",") if args.modes else [cfg.mode],
        server_counts=[int(s) for s in args.servers_list.split(",")]
        if args.servers_list else [cfg.servers],
        layer_counts=[int(s) for s in args.layers_list.split(",")]
        if args.layers_list else [cfg.layers],
        iterations=args.iterations,
        batch=args.batch,
    )
    with _open_out(args.out) as f:
        write_locality_csv(rows, f)
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    metrics = run_strategy(cfg)
    with _open_out(args.out) as f:
        write_results_csv(metrics, f)
    return 0


def _cmd_compare(args) -> int:
    cfg = _load_config(args)
    metrics = compare_strategies(cfg)
    with _open_out(args.out) as f:
        write_results_csv(metrics, f)
    return 0


def _cmd_merge_study(args) -> int:
    cfg = _load_config(args)
    _, _, history = merge_controller(cfg)
    with _open_out(args.out) as f:
        f.write(MERGE_HEADER + "\n")
        for ev in history:
            f.write(f"{ev.epoch_start},{ev.epochs},{ev.columns},"
                    f"{ev.avg_seconds!r},{ev.action}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnnsim",
        description="Desk-scale simulator for distributed GNN training strategies")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", help="output path ('-' for stdout)")

    common(sub.add_parser("gen-graph", help="generate the configured SBM graph"))
    common(sub.add_parser("partition", help="partition the configured graph"))
    loc = sub.add_parser("locality", help="micrograph/subgraph locality report")
    common(loc)
    loc.add_argument("--partitioners", help="comma list, e.g. hash,greedy")
    loc.add_argument("--modes", help="comma list, e.g. node-wise,layer-wise")
    loc.add_argument("--servers-list", help="comma list of server counts")
    loc.add_argument("--layers-list", help="comma list of layer counts")
    loc.add_argument("--iterations", type=int, default=3)
    loc.add_argument("--batch", type=int, default=None)
    common(sub.add_parser("train", help="run the configured strategy"))
    common(sub.add_parser("merge-study", help="run the merging controller"))
    common(sub.add_parser("compare", help="run all strategies on one config"))
    return parser


_COMMANDS = {
    "gen-graph": _cmd_gen_graph,
    "partition": _cmd_partition,
    "locality": _cmd_locality,
    "train": _cmd_train,
    "merge-study": _cmd_merge_study,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
