"""Class-weighted training of the message-passing network with Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DivergenceError, NumericError, TrainingDataError
from .gnn import (ModelConfig, ModelParams, TypeScores, backward, fit_standardization, forward,
                  graph_inputs, init_params, log_softmax_rows)
from .vessel_graph import ArteryGraph

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "node_acc", "edge_acc")


@dataclass
class ClassWeights:
    node_weights: np.ndarray
    edge_weights: np.ndarray


def inverse_frequency(counts: np.ndarray) -> np.ndarray:
    """``N / (K * count_c)`` over the K observed classes; zero for unobserved ones."""
    counts = np.asarray(counts, dtype=np.float64)
    observed = counts > 0
    k = observed.sum()
    w = np.zeros_like(counts)
    if k:
        w[observed] = counts.sum() / (k * counts[observed])
    return w


def compute_class_weights(graphs, n_node_types: int = 21, n_edge_types: int = 23) -> ClassWeights:
    labeled = [g for g in graphs if g.labeled]
    if not labeled:
        raise TrainingDataError("no labeled graphs to compute class weights from")
    nc = np.bincount(np.concatenate([g.node_gt for g in labeled]), minlength=n_node_types)
    ec = np.bincount(np.concatenate([g.edge_gt for g in labeled]), minlength=n_edge_types)
    if nc.sum() == 0:
        raise TrainingDataError("training graphs carry no labels")
    return ClassWeights(inverse_frequency(nc), inverse_frequency(ec))


@dataclass
class LossResult:
    value: float
    d_node_logits: np.ndarray
    d_edge_logits: np.ndarray
    clamped: int = 0


def _weighted_ce(logits, labels, weights, groups, n_groups):
    """Sum over groups of the per-group mean weighted cross-entropy, and its logit gradient."""
    if len(labels) == 0:
        return 0.0, np.zeros_like(logits), 0
    logp = log_softmax_rows(logits)
    rows = np.arange(len(labels))
    true_logp = logp[rows, labels]
    floor = math.log(PROB_CLAMP)
    clamped = int((true_logp < floor).sum())
    true_logp = np.maximum(true_logp, floor)
    sizes = np.bincount(groups, minlength=n_groups).astype(np.float64)
    scale = weights[labels] / sizes[groups]
    value = float(-(scale * true_logp).sum())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= scale[:, None]
    return value, grad, clamped


def loss(scores: TypeScores, node_labels, edge_labels, w: ClassWeights, edge_coef: float = 1.0,
         node_graph=None, edge_graph=None, n_graphs: int = 1) -> LossResult:
    """Node mean weighted CE plus ``edge_coef`` times edge mean weighted CE, averaged over graphs.

    With ``edge_labels`` set to None only the node term is used.
    """
    node_labels = np.asarray(node_labels, dtype=np.int64)
    if node_graph is None:
        node_graph = np.zeros(len(node_labels), dtype=np.int64)
    vn, gn, cn = _weighted_ce(scores.node_logits, node_labels, w.node_weights, node_graph, n_graphs)
    if edge_labels is None or edge_coef == 0:
        ve, ge, ce = 0.0, np.zeros_like(scores.edge_logits), 0
    else:
        edge_labels = np.asarray(edge_labels, dtype=np.int64)
        if edge_graph is None:
            edge_graph = np.zeros(len(edge_labels), dtype=np.int64)
        ve, ge, ce = _weighted_ce(scores.edge_logits, edge_labels, w.edge_weights, edge_graph, n_graphs)
        ve, ge = edge_coef * ve, edge_coef * ge
    if cn + ce:
        logger.debug("clamped %d true-class probabilities at %g", cn + ce, PROB_CLAMP)
    return LossResult((vn + ve) / n_graphs, gn / n_graphs, ge / n_graphs, cn + ce)


def graph_loss(scores: TypeScores, g: ArteryGraph, w: ClassWeights, edge_coef: float = 1.0) -> LossResult:
    return loss(scores, g.node_gt, g.edge_gt, w, edge_coef)


# ---------------------------------------------------------------------------
# augmentation


def translation_offset(g: ArteryGraph, rng: np.random.Generator, fraction: float = 0.10) -> np.ndarray:
    extent = g.pos.max(axis=0) - g.pos.min(axis=0) if g.n_nodes else np.zeros(3)
    return rng.uniform(-1.0, 1.0, 3) * fraction * extent


def augment_translate(g: ArteryGraph, rng: np.random.Generator, fraction: float = 0.10) -> ArteryGraph:
    """Shift all node positions by one random offset within ``fraction`` of the per-axis extent."""
    return g.with_positions(g.pos + translation_offset(g, rng, fraction))


# ---------------------------------------------------------------------------
# distance statistics


@dataclass
class DistanceStats:
    """Per edge type: count, mean and population std of endpoint distance (mm).

    Only full segments contribute: edges whose chain carries a single label
    and whose endpoints are both labeled bifurcation/ending types.
    """

    count: dict = field(default_factory=dict)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def has(self, edge_type: int) -> bool:
        return int(edge_type) in self.count

    def upper_bound(self, edge_type: int, sigma_mult: float) -> float:
        t = int(edge_type)
        return self.mean[t] + sigma_mult * self.std[t]

    def to_dict(self) -> dict:
        return {str(t): {"count": self.count[t], "mean": self.mean[t], "std": self.std[t]}
                for t in sorted(self.count)}

    @classmethod
    def from_dict(cls, d: dict) -> DistanceStats:
        s = cls()
        for k, v in d.items():
            t = int(k)
            s.count[t], s.mean[t], s.std[t] = int(v["count"]), float(v["mean"]), float(v["std"])
        return s


DISTANCE_MEASURES = ("euclidean", "arc_length")


def compute_distance_stats(graphs, measure: str = "euclidean") -> DistanceStats:
    """Endpoint-distance statistics per edge type.

    ``measure="arc_length"`` uses the summed chain length instead of the
    straight-line endpoint distance; the distance guard in refinement expects
    the default.
    """
    if measure not in DISTANCE_MEASURES:
        raise ValueError(f"measure must be one of {DISTANCE_MEASURES}, got {measure!r}")
    values = {}
    for g in graphs:
        if not g.labeled:
            continue
        for k in range(g.n_edges):
            labs = g.chain_labels[k] if g.chain_labels is not None else None
            if labs is not None and np.any(labs != labs[0]):
                continue
            r, s = g.edges[k]
            if g.node_gt[r] == 0 or g.node_gt[s] == 0 or g.edge_gt[k] == 0:
                continue
            d = float(g.edge_dist[k]) if measure == "euclidean" else g.arc_length(k)
            values.setdefault(int(g.edge_gt[k]), []).append(d)
    stats = DistanceStats()
    for t in sorted(values):
        v = np.array(values[t])
        stats.count[t] = len(v)
        stats.mean[t] = float(v.mean())
        stats.std[t] = float(v.std()) if len(v) > 1 else 0.0
    return stats


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr == 0.0:
                continue
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 300
    patience: int = 20
    augmentation_fraction: float = 0.10
    edge_loss_coef: float = 1.0
    val_fraction: float = 0.1
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.augmentation_fraction < 1.0:
            raise ValueError("augmentation_fraction must be in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    stats: DistanceStats
    weights: ClassWeights
    log: list
    best_epoch: int
    steps: int
    validation: list = field(default_factory=list)


def _batch_labels(graphs):
    return (np.concatenate([g.node_gt for g in graphs]), np.concatenate([g.edge_gt for g in graphs]))


def evaluate(params: ModelParams, graphs, w: ClassWeights, edge_coef: float = 1.0, batch_size: int = 64):
    """Mean loss, node accuracy and edge accuracy over ``graphs`` (no augmentation)."""
    total = 0.0
    n_ok = n_all = e_ok = e_all = 0
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        inp = graph_inputs(chunk, params.config.use_direction)
        scores = forward(params, inp)
        ny, ey = _batch_labels(chunk)
        res = loss(scores, ny, ey, w, edge_coef, inp.node_graph, inp.edge_graph, inp.n_graphs)
        total += res.value * len(chunk)
        n_ok += int((scores.node_argmax == ny).sum())
        e_ok += int((scores.edge_argmax == ey).sum())
        n_all += len(ny)
        e_all += len(ey)
    return total / max(len(graphs), 1), n_ok / max(n_all, 1), e_ok / max(e_all, 1)


def train_step(params: ModelParams, batch, w: ClassWeights, cfg: TrainConfig, rng, opt: Adam) -> float:
    positions = None
    if cfg.augmentation_fraction > 0:
        positions = [g.pos + translation_offset(g, rng, cfg.augmentation_fraction) for g in batch]
    inp = graph_inputs(batch, params.config.use_direction, positions)
    scores, cache = forward(params, inp, return_cache=True)
    ny, ey = _batch_labels(batch)
    res = loss(scores, ny, ey, w, cfg.edge_loss_coef, inp.node_graph, inp.edge_graph, inp.n_graphs)
    if not math.isfinite(res.value):
        raise DivergenceError("training loss is not finite")
    grads = backward(params, cache, res.d_node_logits, res.d_edge_logits)
    opt.step(params.weights, grads)
    return res.value


def split_validation(graphs, fraction: float):
    n_val = int(round(len(graphs) * fraction)) if len(graphs) > 1 else 0
    if n_val == 0:
        return list(graphs), []
    return list(graphs[:-n_val]), list(graphs[-n_val:])


def train(graphs, config: TrainConfig | None = None, val_graphs=None, progress=None) -> TrainResult:
    """Train from scratch; keeps the parameters with the best validation loss.

    Raises
    ------
    DivergenceError
        If the loss becomes non-finite. ``exc.params`` holds the last good parameters.
    """
    cfg = config or TrainConfig()
    graphs = [g for g in graphs if g.labeled]
    if not graphs:
        raise TrainingDataError("no labeled training graphs")
    if val_graphs is None:
        graphs, val_graphs = split_validation(graphs, cfg.val_fraction)
    mc = cfg.model
    weights = compute_class_weights(graphs, mc.n_node_types, mc.n_edge_types)
    stats = compute_distance_stats(graphs)
    params = fit_standardization(init_params(mc), graphs)
    opt = Adam(params.weights, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    monitor = val_graphs or graphs

    best = params.copy()
    best_loss, best_epoch, bad = math.inf, 0, 0
    log = []
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(graphs))
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [graphs[i] for i in order[start:start + cfg.batch_size]]
            last_good = params.copy()
            try:
                running += train_step(params, batch, weights, cfg, rng, opt) * len(batch)
                if not all(np.isfinite(v).all() for v in params.weights.values()):
                    raise DivergenceError("parameters became non-finite")
            except (DivergenceError, NumericError, ArithmeticError) as exc:
                err = DivergenceError(f"epoch {epoch}: {exc}")
                err.params = last_good
                raise err from exc
            steps += 1
        train_loss = running / len(graphs)
        try:
            val_loss, node_acc, edge_acc = evaluate(params, monitor, weights, cfg.edge_loss_coef)
        except (NumericError, ArithmeticError) as exc:
            err = DivergenceError(f"epoch {epoch}: validation pass failed: {exc}")
            err.params = last_good
            raise err from exc
        if not math.isfinite(val_loss):
            err = DivergenceError(f"epoch {epoch}: validation loss is not finite")
            err.params = last_good
            raise err
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                    "node_acc": node_acc, "edge_acc": edge_acc})
        if progress is not None:
            progress(log[-1])
        if val_loss < best_loss:
            best_loss, best_epoch, bad = val_loss, epoch, 0
            best = params.copy()
        else:
            bad += 1
            if bad >= cfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    return TrainResult(best, stats, weights, log, best_epoch, steps, list(val_graphs))


def write_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
