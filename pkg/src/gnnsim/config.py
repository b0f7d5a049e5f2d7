"""Run configuration: ASCII key=value files and defaults."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import IO

from .errors import ConfigError

STRATEGIES = (
    "model-centric",
    "naive",
    "locality-optimized",
    "micrograph",
    "micrograph+pg",
    "micrograph+pg+merge",
)

# Tags for deriving independent sub-seeds from the master seed.
SEED_GRAPH = 0x01
SEED_PARTITION = 0x02
SEED_FEATURES = 0x03
SEED_LABELS = 0x04
SEED_BATCHES = 0x05
SEED_SAMPLER = 0x06
SEED_MODEL = 0x07
SEED_MERGE = 0x08


@dataclass
class RunConfig:
    graph: str = "sbm"
    blocks: tuple[int, ...] = (100, 100)
    p_in: float = 0.2
    p_out: float = 0.01
    servers: int = 2
    partitioner: str = "greedy"
    partition_file: str = ""
    slack: float = 0.0
    layers: int = 2
    fanout: tuple[int, ...] = (3,)
    mode: str = "node-wise"
    dim: int = 8
    hidden: int = 8
    classes: int = 4
    arch: str = "gcn"
    lr: float = 0.1
    batch: int = 32
    epochs: int = 1
    iterations: int = 0  # 0 = as many disjoint batches as the graph allows
    strategy: str = "micrograph"
    merge_k: int = 1
    bandwidth: float = math.inf
    latency: float = 0.0
    sync_overhead: float = 0.0
    kernel_launch: float = 0.0
    compute_rate: float = 0.0
    seed: int = 0
    parallel: bool = False
    dump_batches: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.servers < 1:
            raise ConfigError("servers must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        fo = self.fanout if isinstance(self.fanout, tuple) else (self.fanout,)
        if len(fo) == 1:
            fo = fo * self.layers
        if len(fo) != self.layers or any(f < 1 for f in fo):
            raise ConfigError("fanout must give one value, or one per layer, all >= 1")
        self.fanout = fo
        if self.mode not in ("node-wise", "layer-wise"):
            raise ConfigError(f"unknown sampling mode {self.mode!r}")
        if self.partitioner not in ("hash", "greedy", "file"):
            raise ConfigError(f"unknown partitioner {self.partitioner!r}")
        if self.partitioner == "file" and not self.partition_file:
            raise ConfigError("partitioner=file needs partition_file=")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from "
                              + ", ".join(STRATEGIES))
        if self.arch not in ("gcn", "sage-mean"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.dim < 1 or self.hidden < 1 or self.classes < 2:
            raise ConfigError("need dim >= 1, hidden >= 1, classes >= 2")
        if self.batch < 1 or self.epochs < 1 or self.merge_k < 1:
            raise ConfigError("batch, epochs and merge_k must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("bandwidth", "latency", "sync_overhead", "kernel_launch",
                     "compute_rate", "slack"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.graph == "sbm" and (not self.blocks or any(b < 1 for b in self.blocks)):
            raise ConfigError("blocks must all be >= 1")

    def with_strategy(self, strategy: str) -> "RunConfig":
        return replace(self, strategy=strategy)


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        # remaining composite fields are integer tuples
        return tuple(int(x) for x in raw.split(",") if x.strip())
    except (ValueError, KeyError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(source: IO[str] | str | Path, overrides: dict | None = None) -> RunConfig:
    """Parse "key=value" lines ('#' comments) into a RunConfig."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="ascii") as f:
            return parse_config(f, overrides)
    kinds = {f.name: f.type for f in fields(RunConfig)}
    types = {
        "blocks": tuple, "fanout": tuple,
    }
    values: dict = {}
    for lineno, raw in enumerate(source, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = getattr(RunConfig, key, None)
        kind = types.get(key, type(default))
        values[key] = _parse_value(key, val, kind)
    if overrides:
        values.update(overrides)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
