"""Exact dense forward/backward for small GCN and mean-aggregator SAGE.

Everything is float64 internally (features arrive as float32 rows) so the
gradient-equivalence checks between training strategies hold to ~1e-15, far
inside the 1e-9 acceptance tolerance.  Per-root losses are summed and
normalized by the global batch total at sync time, which makes gradient
accumulation across migrated micrographs numerically equal to batch training.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .errors import InvariantViolation
from .featstore import BYTES_PER_ELEM, GRADIENT, CommLedger
from .rng import chain, hash_vec, uniform01_f64_vec
from .sampler import Micrograph

GCN = "gcn"
SAGE_MEAN = "sage-mean"
ARCHS = (GCN, SAGE_MEAN)


@dataclass
class ModelState:
    """Layer weights/biases plus the root classifier of a small GNN."""

    arch: str
    weights: list[np.ndarray]  # W_k, shape (in_k, out_k); sage uses in_k = 2*prev
    biases: list[np.ndarray]
    classifier: np.ndarray     # (out_L, n_classes)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.classifier.shape[1]

    def layer_in_dim(self, k: int) -> int:
        """Width of the activations feeding layer k (1-based)."""
        w = self.weights[k - 1].shape[0]
        return w // 2 if self.arch == SAGE_MEAN else w

    @property
    def param_count(self) -> int:
        return (sum(w.size for w in self.weights)
                + sum(b.size for b in self.biases) + self.classifier.size)

    @property
    def param_bytes(self) -> int:
        # Transport convention: 4 bytes per element, like features.
        return self.param_count * BYTES_PER_ELEM

    def copy(self) -> "ModelState":
        return ModelState(self.arch, [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.classifier.copy())

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.classifier]

    def params_equal(self, other: "ModelState") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))


def init_model(arch: str, feat_dim: int, hidden: int, n_layers: int,
               n_classes: int, seed: int) -> ModelState:
    """Deterministic Glorot-style uniform init keyed on (seed, layer, index)."""
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    weights, biases = [], []
    in_dim = feat_dim
    for k in range(n_layers):
        rows = 2 * in_dim if arch == SAGE_MEAN else in_dim
        weights.append(_glorot(rows, hidden, chain(seed, 0x11, k)))
        biases.append(np.zeros(hidden, dtype=np.float64))
        in_dim = hidden
    classifier = _glorot(in_dim, n_classes, chain(seed, 0x12))
    return ModelState(arch, weights, biases, classifier)


def _glorot(rows: int, cols: int, state: int) -> np.ndarray:
    scale = np.sqrt(6.0 / (rows + cols))
    u = uniform01_f64_vec(hash_vec(state, np.arange(rows * cols, dtype=np.int64)))
    return ((u * 2.0 - 1.0) * scale).reshape(rows, cols)


@dataclass(frozen=True)
class LabelOracle:
    """Deterministic class labels: label(v) = hash(seed, v) mod C."""

    n_classes: int
    seed: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")

    def labels(self, ids: np.ndarray) -> np.ndarray:
        h = hash_vec(chain(self.seed, 0x1A), np.asarray(ids, dtype=np.int64))
        return (h % np.uint64(self.n_classes)).astype(np.int64)

    def label(self, v: int) -> int:
        return int(self.labels(np.array([v]))[0])


@dataclass
class Gradients:
    """Parameter-shaped gradient triple."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    classifier: np.ndarray

    @classmethod
    def zeros_like(cls, model: ModelState) -> "Gradients":
        return cls([np.zeros_like(w) for w in model.weights],
                   [np.zeros_like(b) for b in model.biases],
                   np.zeros_like(model.classifier))

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.classifier]

    def add(self, other: "Gradients") -> None:
        for a, b in zip(self.arrays(), other.arrays()):
            if a.shape != b.shape:
                raise ValueError("gradient shape mismatch")
            a += b

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([w * factor for w in self.weights],
                         [b * factor for b in self.biases],
                         self.classifier * factor)

    def max_abs(self) -> float:
        return max(float(np.abs(a).max()) if a.size else 0.0 for a in self.arrays())


@dataclass
class GradAccumulator:
    """Running gradient sum owned by one logical model for one iteration."""

    model_id: int
    grads: Gradients
    count: int = 0

    @classmethod
    def for_model(cls, model_id: int, model: ModelState) -> "GradAccumulator":
        return cls(model_id, Gradients.zeros_like(model))

    def reset(self) -> None:
        for a in self.grads.arrays():
            a[:] = 0.0
        self.count = 0


def accumulate(acc: GradAccumulator, g: Gradients) -> None:
    acc.grads.add(g)
    acc.count += 1


@dataclass
class MicroPlan:
    """Index plan for computing a micrograph layer by layer.

    need[k] lists the vertices whose layer-k values must exist: the sampled
    layer plus every vertex chained down from above for its own self term
    (layer-0 values are raw features, so the chain bottoms out there).
    layers[k-1] holds (self_pos, dpos, spos, deg): positions of each need[k]
    vertex in need[k-1], the sampled pair endpoints remapped onto the need
    sets, and the sampled in-degree per destination.
    """

    need: list[np.ndarray]
    layers: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


def build_plan(micro: Micrograph) -> MicroPlan:
    L = micro.n_layers
    need: list[np.ndarray] = [None] * (L + 1)  # type: ignore[list-item]
    need[L] = micro.layers[L]
    for k in range(L - 1, -1, -1):
        need[k] = np.union1d(micro.layers[k], need[k + 1])
    layers = []
    for k in range(1, L + 1):
        dst_ids, prev_ids = need[k], need[k - 1]
        self_pos = np.searchsorted(prev_ids, dst_ids)
        dst_idx, src_idx = micro.pairs[k - 1]
        dpos = np.searchsorted(dst_ids, micro.layers[k][dst_idx])
        spos = np.searchsorted(prev_ids, micro.layers[k - 1][src_idx])
        deg = np.bincount(dpos, minlength=len(dst_ids)).astype(np.float64)
        layers.append((self_pos, dpos, spos, deg))
    return MicroPlan(need, layers)


@dataclass
class ForwardState:
    """Forward artifacts retained for backward."""

    micro: Micrograph
    plan: MicroPlan
    values: list[np.ndarray]        # per layer: activations (layer 0 = inputs)
    aggregates: list[np.ndarray]    # per layer >= 1: pre-transform aggregation
    pre_relu: list[np.ndarray]
    logits: np.ndarray


def forward(micro: Micrograph, features: np.ndarray, model: ModelState) -> ForwardState:
    """Run the layered forward pass of one micrograph.

    features must hold one row per micro.vertices entry, in that order.
    gcn aggregates mean(neighbors + self); sage-mean feeds
    concat(self, mean(neighbors)) with the self value standing in for an
    empty neighbor set.  A destination with no sampled pairs at some layer
    (isolated vertex, or a vertex only chained through for its own later
    self term) degenerates to self-aggregation.
    """
    if features.shape[0] != micro.vertex_count:
        raise ValueError("need one feature row per micrograph vertex")
    L = micro.n_layers
    plan = build_plan(micro)
    x = np.asarray(features, dtype=np.float64)
    values: list[np.ndarray] = [x[np.searchsorted(micro.vertices, plan.need[0])]]
    aggregates, pre_relu = [], []
    for k in range(1, L + 1):
        self_pos, dpos, spos, deg = plan.layers[k - 1]
        h_prev = values[k - 1]
        summed = np.zeros((len(plan.need[k]), h_prev.shape[1]), dtype=np.float64)
        np.add.at(summed, dpos, h_prev[spos])
        h_self = h_prev[self_pos]
        if model.arch == GCN:
            agg = (summed + h_self) / (deg + 1.0)[:, None]
        else:
            safe = np.maximum(deg, 1.0)
            nbr_mean = np.where((deg > 0)[:, None], summed / safe[:, None], h_self)
            agg = np.concatenate([h_self, nbr_mean], axis=1)
        z = agg @ model.weights[k - 1] + model.biases[k - 1]
        values.append(np.maximum(z, 0.0))
        aggregates.append(agg)
        pre_relu.append(z)
    logits = values[L][0] @ model.classifier
    return ForwardState(micro, plan, values, aggregates, pre_relu, logits)


def loss_and_backward(state: ForwardState, label: int,
                      model: ModelState) -> tuple[float, Gradients]:
    """Softmax cross-entropy on the root; unscaled d(loss)/d(params)."""
    logits = state.logits
    shifted = logits - logits.max()
    expv = np.exp(shifted)
    probs = expv / expv.sum()
    loss = float(np.log(expv.sum()) - shifted[label])
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    g = Gradients.zeros_like(model)
    L = model.n_layers
    h_root = state.values[L][0]
    g.classifier += np.outer(h_root, dlogits)
    dh = np.zeros_like(state.values[L])
    dh[0] = model.classifier @ dlogits
    for k in range(L, 0, -1):
        self_pos, dpos, spos, deg = state.plan.layers[k - 1]
        dz = dh * (state.pre_relu[k - 1] > 0.0)
        g.weights[k - 1] += state.aggregates[k - 1].T @ dz
        g.biases[k - 1] += dz.sum(axis=0)
        dagg = dz @ model.weights[k - 1].T
        dh_prev = np.zeros_like(state.values[k - 1])
        if model.arch == GCN:
            scale = 1.0 / (deg + 1.0)
            dh_prev[self_pos] += dagg * scale[:, None]
            np.add.at(dh_prev, spos, (dagg * scale[:, None])[dpos])
        else:
            prev_dim = state.values[k - 1].shape[1]
            dself = dagg[:, :prev_dim]
            dnbr = dagg[:, prev_dim:]
            dh_prev[self_pos] += dself
            has = deg > 0
            contrib = np.where(has[:, None], dnbr / np.maximum(deg, 1.0)[:, None], 0.0)
            np.add.at(dh_prev, spos, contrib[dpos])
            dh_prev[self_pos] += np.where(has[:, None], 0.0, dnbr)
        dh = dh_prev
    return loss, g


def micrograph_loss(micro: Micrograph, features: np.ndarray, label: int,
                    model: ModelState) -> float:
    """Loss only (used by finite-difference oracles)."""
    st = forward(micro, features, model)
    shifted = st.logits - st.logits.max()
    expv = np.exp(shifted)
    return float(np.log(expv.sum()) - shifted[label])


def sync_and_update(models: Sequence[ModelState], accs: Sequence[GradAccumulator],
                    batch_total: int, lr: float,
                    ledger: CommLedger | None = None) -> Gradients:
    """All-reduce the accumulated gradients and step every replica.

    global = sum(accs) / batch_total; every model applies the same SGD step.
    Byte accounting follows a ring all-reduce: each server sends
    2*(N-1)/N * param_bytes along its ring link, 2*(N-1) messages per link.
    """
    n = len(models)
    if n == 0:
        raise ValueError("no models")
    base = models[0]
    for m in models[1:]:
        if not base.params_equal(m):
            raise InvariantViolation("replicas diverged before gradient sync")
    total = Gradients.zeros_like(base)
    for acc in accs:
        total.add(acc.grads)
    if batch_total > 0:
        step = total.scaled(1.0 / batch_total)
    else:
        step = total
    for m in models:
        for p, gr in zip(m.params(), step.arrays()):
            p -= lr * gr
    if ledger is not None and n > 1:
        per_link = 2.0 * (n - 1) / n * base.param_bytes
        for s in range(n):
            ledger.add(s, (s + 1) % n, GRADIENT, per_link, 2 * (n - 1))
    return step


def dump_params(model: ModelState, sink: IO[str]) -> None:
    """Debug dump: every parameter array row-major, 17 significant digits."""
    for name, arr in _named_params(model):
        sink.write(f"# {name} shape={'x'.join(map(str, arr.shape))}\n")
        for value in arr.reshape(-1):
            sink.write(f"{value:.17g}\n")


def _named_params(model: ModelState):
    for k, w in enumerate(model.weights, start=1):
        yield f"W{k}", w
    for k, b in enumerate(model.biases, start=1):
        yield f"b{k}", b
    yield "Wc", model.classifier
