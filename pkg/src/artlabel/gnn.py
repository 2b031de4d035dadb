"""Encode-process-decode message-passing network in plain numpy.

Each undirected edge is run as two directed copies so both endpoints receive
messages. Copy ``k`` (k < E) has receiver ``r_k`` and sender ``s_k``; copy
``E + k`` is the reverse. One core graph block, with weights shared across
rounds, computes::

    e'  = phi_e([e, v_receiver, v_sender])
    agg = sum of e' over directed edges into each node
    v'  = phi_v([agg, v])

where the core input at every round is the encoder output concatenated with
the previous round's output. Edge logits are decoded from the sum of the two
directed latents of each edge.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InputError, NumericError
from .vessel_graph import EDGE_FEATURE_DIM, NODE_FEATURE_DIM, ArteryGraph

CHECKPOINT_FORMAT = "artlabel-checkpoint"
CHECKPOINT_VERSION = 1

MLP_NAMES = ("node_encoder", "edge_encoder", "core_edge", "core_node", "node_decoder", "edge_decoder")


@dataclass
class ModelConfig:
    latent_dim: int = 64
    hidden_dim: int = 64
    mlp_layers: int = 2
    rounds: int = 10
    aggregation: str = "sum"
    node_in: int = NODE_FEATURE_DIM
    edge_in: int = EDGE_FEATURE_DIM
    n_node_types: int = 21
    n_edge_types: int = 23
    use_direction: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.aggregation not in ("sum", "mean"):
            raise ValueError(f"aggregation must be 'sum' or 'mean', got {self.aggregation!r}")
        if self.rounds < 1 or self.mlp_layers < 1:
            raise ValueError("rounds and mlp_layers must be >= 1")

    def mlp_dims(self) -> dict:
        L, H = self.latent_dim, self.hidden_dim
        hidden = [H] * (self.mlp_layers - 1)
        return {
            "node_encoder": [self.node_in, *hidden, L],
            "edge_encoder": [self.edge_in, *hidden, L],
            "core_edge": [6 * L, *hidden, L],
            "core_node": [3 * L, *hidden, L],
            "node_decoder": [L, *hidden, self.n_node_types],
            "edge_decoder": [L, *hidden, self.n_edge_types],
        }


@dataclass
class ModelParams:
    """Network weights plus the fixed input standardization."""

    config: ModelConfig
    weights: dict
    node_shift: np.ndarray = None
    node_scale: np.ndarray = None
    edge_shift: np.ndarray = None
    edge_scale: np.ndarray = None

    def __post_init__(self):
        c = self.config
        if self.node_shift is None:
            self.node_shift = np.zeros(c.node_in)
            self.node_scale = np.ones(c.node_in)
        if self.edge_shift is None:
            self.edge_shift = np.zeros(c.edge_in)
            self.edge_scale = np.ones(c.edge_in)

    def names(self) -> list[str]:
        return list(self.weights)

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                           self.node_shift.copy(), self.node_scale.copy(),
                           self.edge_shift.copy(), self.edge_scale.copy())

    def n_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())


def init_params(config: ModelConfig | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, from ``config.seed``."""
    config = config or ModelConfig()
    rng = np.random.default_rng(config.seed)
    weights = {}
    for name, dims in config.mlp_dims().items():
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights[f"{name}/W{i}"] = rng.uniform(-limit, limit, (fan_in, fan_out))
            weights[f"{name}/b{i}"] = np.zeros(fan_out)
    return ModelParams(config, weights)


def fit_standardization(params: ModelParams, graphs) -> ModelParams:
    """Per-column mean/std of node and edge input features over ``graphs``."""
    nx = np.concatenate([g.node_features(params.config.use_direction) for g in graphs])
    ex = np.concatenate([g.edge_features() for g in graphs])
    out = params.copy()
    out.node_shift, out.node_scale = nx.mean(0), _safe_std(nx)
    out.edge_shift, out.edge_scale = ex.mean(0), _safe_std(ex)
    return out


def _safe_std(x):
    s = x.std(0)
    return np.where(s > 1e-8, s, 1.0)


# ---------------------------------------------------------------------------
# batching


@dataclass
class GraphInputs:
    """One graph or a disjoint union of several, ready for the network."""

    node_x: np.ndarray
    edge_x: np.ndarray
    edges: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    n_graphs: int = 1
    _mats: tuple = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_x)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def directed(self):
        recv = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        send = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return recv, send

    def incidence(self):
        """Sparse (N, 2E) receiver and sender indicator matrices."""
        if self._mats is None:
            recv, send = self.directed()
            m = len(recv)
            cols = np.arange(m)
            ones = np.ones(m)
            R = sp.csr_matrix((ones, (recv, cols)), shape=(self.n_nodes, m))
            S = sp.csr_matrix((ones, (send, cols)), shape=(self.n_nodes, m))
            self._mats = (R, S)
        return self._mats


def graph_inputs(graphs, use_direction: bool = True, positions=None) -> GraphInputs:
    """Stack graphs into one disjoint union; ``positions`` optionally overrides node positions."""
    if isinstance(graphs, ArteryGraph):
        graphs = [graphs]
    node_x, edge_x, edges, ng, eg = [], [], [], [], []
    offset = 0
    for gi, g in enumerate(graphs):
        nf = g.node_features(use_direction)
        if positions is not None:
            nf = nf.copy()
            nf[:, :3] = positions[gi]
        node_x.append(nf)
        edge_x.append(g.edge_features())
        edges.append(g.edges + offset)
        ng.append(np.full(g.n_nodes, gi))
        eg.append(np.full(g.n_edges, gi))
        offset += g.n_nodes
    return GraphInputs(
        node_x=np.concatenate(node_x), edge_x=np.concatenate(edge_x).reshape(-1, EDGE_FEATURE_DIM),
        edges=np.concatenate(edges).reshape(-1, 2).astype(np.int64),
        node_graph=np.concatenate(ng), edge_graph=np.concatenate(eg), n_graphs=len(graphs))


# ---------------------------------------------------------------------------
# forward / backward


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class TypeScores:
    node_logits: np.ndarray
    node_probs: np.ndarray
    edge_logits: np.ndarray
    edge_probs: np.ndarray

    @property
    def node_argmax(self) -> np.ndarray:
        return self.node_probs.argmax(axis=1)

    @property
    def edge_argmax(self) -> np.ndarray:
        return self.edge_probs.argmax(axis=1)

    @classmethod
    def from_logits(cls, node_logits, edge_logits) -> TypeScores:
        return cls(node_logits, softmax_rows(node_logits), edge_logits, softmax_rows(edge_logits))

    @classmethod
    def from_probs(cls, node_probs, edge_probs) -> TypeScores:
        """Scores given directly as probabilities (logits are their logs)."""
        with np.errstate(divide="ignore"):
            return cls(np.log(node_probs), np.asarray(node_probs, dtype=np.float64),
                       np.log(edge_probs), np.asarray(edge_probs, dtype=np.float64))

    def split(self, inputs: GraphInputs) -> list[TypeScores]:
        out = []
        for gi in range(inputs.n_graphs):
            nm = inputs.node_graph == gi
            em = inputs.edge_graph == gi
            out.append(TypeScores(self.node_logits[nm], self.node_probs[nm],
                                  self.edge_logits[em], self.edge_probs[em]))
        return out


def _check(x, block, round_index=None):
    if not np.isfinite(x).all():
        raise NumericError(block, round_index)


def _mlp_forward(w, name, n_layers, x):
    acts = [x]
    h = x
    for i in range(n_layers):
        h = h @ w[f"{name}/W{i}"] + w[f"{name}/b{i}"]
        if i < n_layers - 1:
            np.maximum(h, 0.0, out=h)
        acts.append(h)
    return h, acts


def _mlp_backward(w, name, n_layers, acts, dy, grads, need_dx=True):
    d = dy
    for i in reversed(range(n_layers)):
        a_in = acts[i]
        grads[f"{name}/W{i}"] += a_in.T @ d
        grads[f"{name}/b{i}"] += d.sum(axis=0)
        if i == 0 and not need_dx:
            return None
        d = d @ w[f"{name}/W{i}"].T
        if i > 0:
            d = d * (acts[i] > 0)
    return d


@dataclass
class ForwardCache:
    inputs: GraphInputs
    shapes: dict
    enc_n: list
    enc_e: list
    rounds: list
    dec_n: list
    dec_e: list
    agg_mat: object = None


def forward(params: ModelParams, inputs, return_cache: bool = False):
    """Node and edge type scores for a graph (or :class:`GraphInputs` batch).

    Returns ``TypeScores``, or ``(TypeScores, ForwardCache)`` when
    ``return_cache`` is set.
    """
    if isinstance(inputs, ArteryGraph):
        inputs = graph_inputs(inputs, params.config.use_direction)
    c = params.config
    w = params.weights
    nl = c.mlp_layers
    if inputs.n_nodes == 0:
        raise InputError("graph has no nodes")
    if inputs.node_x.shape[1] != c.node_in or inputs.edge_x.shape[1] != c.edge_in:
        raise InputError("feature dimensions do not match the encoders")
    E = inputs.n_edges
    xn = (inputs.node_x - params.node_shift) / params.node_scale
    xe = (inputs.edge_x - params.edge_shift) / params.edge_scale
    R, S = inputs.incidence()
    recv, send = inputs.directed()
    if c.aggregation == "mean":
        indeg = np.asarray(R.sum(axis=1)).ravel()
        agg_mat = sp.diags(1.0 / np.maximum(indeg, 1.0)) @ R
    else:
        agg_mat = R

    n0, enc_n = _mlp_forward(w, "node_encoder", nl, xn)
    _check(n0, "node_encoder")
    e0u, enc_e = _mlp_forward(w, "edge_encoder", nl, xe)
    _check(e0u, "edge_encoder")
    e0 = np.concatenate([e0u, e0u])
    n, e = n0, e0
    rounds = []
    for t in range(c.rounds):
        nin = np.concatenate([n0, n], axis=1)
        ein = np.concatenate([e0, e, nin[recv], nin[send]], axis=1)
        e_new, acts_e = _mlp_forward(w, "core_edge", nl, ein)
        _check(e_new, "core_edge", t + 1)
        agg = agg_mat @ e_new
        n_new, acts_n = _mlp_forward(w, "core_node", nl, np.concatenate([agg, nin], axis=1))
        _check(n_new, "core_node", t + 1)
        rounds.append((acts_e, acts_n))
        n, e = n_new, e_new
    node_logits, dec_n = _mlp_forward(w, "node_decoder", nl, n)
    _check(node_logits, "node_decoder")
    edge_latent = e[:E] + e[E:]
    edge_logits, dec_e = _mlp_forward(w, "edge_decoder", nl, edge_latent)
    _check(edge_logits, "edge_decoder")
    scores = TypeScores.from_logits(node_logits, edge_logits)
    if not return_cache:
        return scores
    shapes = {k: v.shape for k, v in w.items()}
    return scores, ForwardCache(inputs, shapes, enc_n, enc_e, rounds, dec_n, dec_e, agg_mat)


def backward(params: ModelParams, cache: ForwardCache, d_node_logits, d_edge_logits) -> dict:
    """Parameter gradients by reverse-mode accumulation through the cached forward pass."""
    w = params.weights
    if {k: v.shape for k, v in w.items()} != cache.shapes:
        raise RuntimeError("forward cache does not belong to these parameters")
    c = params.config
    nl, L = c.mlp_layers, c.latent_dim
    inputs = cache.inputs
    E = inputs.n_edges
    R, S = inputs.incidence()
    agg_mat = cache.agg_mat
    grads = {k: np.zeros_like(v) for k, v in w.items()}

    dn = _mlp_backward(w, "node_decoder", nl, cache.dec_n, np.asarray(d_node_logits, dtype=np.float64), grads)
    d_lat = _mlp_backward(w, "edge_decoder", nl, cache.dec_e, np.asarray(d_edge_logits, dtype=np.float64), grads)
    de = np.concatenate([d_lat, d_lat])
    d_n0 = np.zeros((inputs.n_nodes, L))
    d_e0 = np.zeros((2 * E, L))
    for acts_e, acts_n in reversed(cache.rounds):
        d_vin = _mlp_backward(w, "core_node", nl, acts_n, dn, grads)
        d_agg, d_nin = d_vin[:, :L], d_vin[:, L:].copy()
        d_enew = de + agg_mat.T @ d_agg
        d_ein = _mlp_backward(w, "core_edge", nl, acts_e, d_enew, grads)
        d_nin += R @ d_ein[:, 2 * L:4 * L]
        d_nin += S @ d_ein[:, 4 * L:]
        d_e0 += d_ein[:, :L]
        de = d_ein[:, L:2 * L]
        d_n0 += d_nin[:, :L]
        dn = d_nin[:, L:]
    # the first round's "previous output" is the encoder output itself
    d_n0 += dn
    d_e0 += de
    d_e0u = d_e0[:E] + d_e0[E:]
    _mlp_backward(w, "node_encoder", nl, cache.enc_n, d_n0, grads, need_dx=False)
    _mlp_backward(w, "edge_encoder", nl, cache.enc_e, d_e0u, grads, need_dx=False)
    return grads


def predict(params: ModelParams, g: ArteryGraph) -> TypeScores:
    return forward(params, graph_inputs(g, params.config.use_direction))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(params: ModelParams, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "standardization": {
            "node_shift": params.node_shift.tolist(), "node_scale": params.node_scale.tolist(),
            "edge_shift": params.edge_shift.tolist(), "edge_scale": params.edge_scale.tolist(),
        },
        "weights": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.weights.items()},
        **(extra or {}),
    }


def params_from_dict(d: dict) -> ModelParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise InputError("not an artlabel checkpoint")
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {d.get('format_version')}")
    config = ModelConfig(**d["config"])
    weights = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["weights"].items()}
    st = d["standardization"]
    return ModelParams(config, weights,
                       np.array(st["node_shift"]), np.array(st["node_scale"]),
                       np.array(st["edge_shift"]), np.array(st["edge_scale"]))


def save_checkpoint(path, params: ModelParams, extra: dict | None = None):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(checkpoint_dict(params, extra), f, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    return params_from_dict(d), d
