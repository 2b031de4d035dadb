"""Hierarchical refinement of network scores into a consistent anatomical labeling.

Level one freezes confident nodes: those whose predicted type is what the
lookup table derives from their predicted incident edge types. Level two
resolves the major and branch nodes of each sub-tree (left anterior, right
anterior, posterior, in that order). Level three adds the optional branches
and fills everything else.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .anatomy import NON_TYPE, AnatomySchema, SubTreeDef
from .gnn import TypeScores
from .training import DistanceStats
from .vessel_graph import ArteryGraph

logger = logging.getLogger(__name__)

GNN = "gnn"
LEVEL1 = "level1_confident"
LEVEL2_MAJOR = "level2_major"
LEVEL2_BRANCH = "level2_branch"
LEVEL2_REINSERTED = "level2_reinserted"
LEVEL3 = "level3_optional"
PROVENANCES = (GNN, LEVEL1, LEVEL2_MAJOR, LEVEL2_BRANCH, LEVEL2_REINSERTED, LEVEL3)


@dataclass(frozen=True)
class HRConfig:
    thres: float = 1e-10
    distance_sigma_mult: float = 1.5
    # label for an edge whose two labeled end types span no schema segment:
    # "gnn" keeps the network's edge argmax, "non_type" forces Non_Type
    unmatched_segment: str = "gnn"
    residual_min_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.thres < 1.0:
            raise ValueError("thres must be in (0, 1)")
        if self.distance_sigma_mult <= 0:
            raise ValueError("distance_sigma_mult must be > 0")
        if self.unmatched_segment not in ("gnn", "non_type"):
            raise ValueError("unmatched_segment must be 'gnn' or 'non_type'")


@dataclass(frozen=True)
class Reinsertion:
    edge: int
    point: int
    node_type: int
    position: tuple
    major_side_label: int
    far_side_label: int


@dataclass
class Selection:
    """One level-two decision, kept so the objective can be audited."""

    subtree: str
    role: str  # "major" or "branch"
    node_type: int
    node: int | None
    score: float | None
    candidates: tuple
    major: int | None = None
    with_edge_term: bool = False
    guarded: bool = False


@dataclass
class LabelingResult:
    node_labels: np.ndarray
    edge_labels: np.ndarray
    provenance: list
    reinserted_nodes: list = field(default_factory=list)
    selections: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    node_prob: np.ndarray | None = None

    def to_dict(self, schema: AnatomySchema | None = None, case_id: str = "") -> dict:
        nn = (lambda t: schema.node_names[int(t)]) if schema else int
        en = (lambda t: schema.edge_names[int(t)]) if schema else int
        nodes = []
        for i, t in enumerate(self.node_labels):
            rec = {"index": i, "label": nn(t), "provenance": self.provenance[i]}
            if self.node_prob is not None:
                rec["probability"] = float(self.node_prob[i])
            nodes.append(rec)
        return {
            "format": "artlabel-labels",
            "format_version": 1,
            "case_id": case_id,
            "schema_version": schema.schema_version if schema else None,
            "nodes": nodes,
            "edges": [{"index": k, "label": en(t)} for k, t in enumerate(self.edge_labels)],
            "reinserted": [{"edge": r.edge, "point": r.point, "label": nn(r.node_type),
                            "position": list(r.position),
                            "major_side_label": en(r.major_side_label),
                            "far_side_label": en(r.far_side_label)} for r in self.reinserted_nodes],
            "warnings": list(self.warnings),
        }


# ---------------------------------------------------------------------------
# graph search


def adjacency(g: ArteryGraph) -> list:
    """Per node, sorted (neighbor, edge index) pairs."""
    adj = [[] for _ in range(g.n_nodes)]
    for k, (r, s) in enumerate(g.edges):
        adj[r].append((int(s), k))
        adj[s].append((int(r), k))
    for a in adj:
        a.sort()
    return adj


class PathTree:
    """Shortest paths from ``source`` ranked by hop count, then Euclidean length.

    Nodes outside ``passable`` (when given) can be reached but not expanded.
    """

    def __init__(self, g: ArteryGraph, adj, source: int, passable=None):
        self.source = source
        self.cost = {source: (0, 0.0)}
        self.pred = {source: (None, None)}
        heap = [(0, 0.0, source)]
        done = set()
        while heap:
            hops, length, u = heapq.heappop(heap)
            if u in done:
                continue
            done.add(u)
            if u != source and passable is not None and u not in passable:
                continue
            for v, k in adj[u]:
                c = (hops + 1, length + float(g.edge_dist[k]))
                if v not in self.cost or c < self.cost[v]:
                    self.cost[v] = c
                    self.pred[v] = (u, k)
                    heapq.heappush(heap, (c[0], c[1], v))

    def reaches(self, v: int) -> bool:
        return v in self.cost

    def nodes_to(self, v: int) -> list:
        out = [v]
        while self.pred[out[-1]][0] is not None:
            out.append(self.pred[out[-1]][0])
        return out[::-1]

    def edges_to(self, v: int) -> list:
        out = []
        while self.pred[v][0] is not None:
            v, k = self.pred[v]
            out.append(k)
        return out[::-1]


def components(g: ArteryGraph, adj) -> np.ndarray:
    comp = np.full(g.n_nodes, -1, dtype=np.int64)
    c = 0
    for s in range(g.n_nodes):
        if comp[s] >= 0:
            continue
        comp[s] = c
        q = deque([s])
        while q:
            u = q.popleft()
            for v, _ in adj[u]:
                if comp[v] < 0:
                    comp[v] = c
                    q.append(v)
        c += 1
    return comp


# ---------------------------------------------------------------------------
# level one


def level1_confident(scores: TypeScores, g: ArteryGraph, schema: AnatomySchema) -> dict:
    """Map node -> predicted type for every node whose prediction the lookup table confirms."""
    tn, te = scores.node_argmax, scores.edge_argmax
    incident = [[] for _ in range(g.n_nodes)]
    for k, (r, s) in enumerate(g.edges):
        incident[r].append(int(te[k]))
        incident[s].append(int(te[k]))
    out = {}
    for i in range(g.n_nodes):
        if tn[i] == NON_TYPE:
            continue
        if schema.lookup.lookup(incident[i]) == tn[i]:
            out[i] = int(tn[i])
    return out


# ---------------------------------------------------------------------------
# level two


class _State:
    def __init__(self, g, scores, schema, cfg):
        self.g, self.scores, self.schema, self.cfg = g, scores, schema, cfg
        self.adj = adjacency(g)
        self.comp = components(g, self.adj)
        self.labels = {}
        self.prov = {}
        self.assigned = set()
        self.edge_override = {}
        self.path_interior = set()
        self.reinserted = []
        self.selections = []
        self.warnings = []
        self._trees = {}

    def label(self, node, t, prov):
        self.labels[node] = int(t)
        self.prov[node] = prov
        if t != NON_TYPE:
            self.assigned.add(int(t))

    def unlabeled(self, node) -> bool:
        return node not in self.labels

    def tree(self, source) -> PathTree:
        if source not in self._trees:
            self._trees[source] = PathTree(self.g, self.adj, source)
        return self._trees[source]

    def warn(self, msg):
        logger.debug(msg)
        self.warnings.append(msg)


def subtree_membership(g: ArteryGraph, adj, confident: dict, schema: AnatomySchema) -> np.ndarray:
    """Index of the nearest sub-tree (by hops to its confident anchors) per node; -1 if unreachable.

    Ties go to the sub-tree listed first in the schema.
    """
    n_sub = len(schema.subtrees)
    dist = np.full((n_sub, g.n_nodes), np.iinfo(np.int64).max, dtype=np.int64)
    for t, st in enumerate(schema.subtrees):
        members = set(st.member_nodes)
        q = deque()
        for node, typ in sorted(confident.items()):
            if typ in members:
                dist[t, node] = 0
                q.append(node)
        while q:
            u = q.popleft()
            for v, _ in adj[u]:
                if dist[t, v] > dist[t, u] + 1:
                    dist[t, v] = dist[t, u] + 1
                    q.append(v)
    out = np.argmin(dist, axis=0)
    out[dist.min(axis=0) == np.iinfo(np.int64).max] = -1
    return out


def major_candidates(state: _State, st: SubTreeDef, region: set) -> list:
    """Nodes eligible as the major node of ``st``."""
    g = state.g
    branches = set(st.branch_nodes)
    conf_branches = sorted(n for n, t in state.labels.items() if t in branches)

    def eligible(n):
        return g.degree[n] != 1 and state.unlabeled(n)

    pool = sorted(n for n in region if eligible(n))
    if len(conf_branches) < 2:
        return pool
    path_sets = []
    for a, b in itertools.combinations(conf_branches, 2):
        tr = state.tree(a)
        if tr.reaches(b):
            path_sets.append(set(tr.nodes_to(b)))
    if not path_sets:
        return pool
    inter = set.intersection(*path_sets)
    cands = sorted(n for n in inter if eligible(n))
    if cands:
        return cands
    union = set.union(*path_sets)
    cands = sorted(n for n in union if eligible(n))
    return cands or pool


def branch_objective(state: _State, major: int | None, node: int, node_type: int, edge_type: int,
                     with_edge_term: bool) -> float:
    """Node probability of ``node_type`` plus, optionally, the mean expected-segment
    probability over the shortest path from the major node."""
    p = float(state.scores.node_probs[node, node_type])
    if not with_edge_term:
        return p
    path = state.tree(major).edges_to(node)
    if not path:
        return p
    return p + float(np.mean(state.scores.edge_probs[path, edge_type]))


def _reinsert(state: _State, st: SubTreeDef, major: int, cand: int, j: int, target: float):
    """Pick the interior chain point on the major -> ``cand`` path closest to ``target`` mm from the major."""
    g = state.g
    tr = state.tree(major)
    edge_path = tr.edges_to(cand)
    best = None
    for step, k in enumerate(edge_path):
        ch = g.chains[k]
        for p in range(1, len(ch) - 1):
            d = float(np.linalg.norm(ch[p, :3] - g.pos[major]))
            key = (abs(d - target), step, p)
            if best is None or key < best[0]:
                best = (key, step, k, p)
    if best is None:
        state.warn(f"{st.name}: no chain point available to re-insert {state.schema.node_names[j]}")
        return
    _, step, k, p = best
    expected = st.expected_connecting_edge[j]
    distal = {d["node"]: d["edge"] for d in state.schema.level3.get("distal", [])}
    far = distal.get(j, int(state.scores.edge_argmax[k]))
    for s, kk in enumerate(edge_path):
        if s < step:
            state.edge_override[kk] = expected
        elif s > step:
            state.edge_override.setdefault(kk, far)
    # split edge keeps the label of its half adjacent to the major node
    state.edge_override[k] = expected
    state.reinserted.append(Reinsertion(int(k), int(p), int(j), tuple(float(v) for v in g.chains[k][p, :3]),
                                        int(expected), int(far)))
    state.assigned.add(int(j))


def resolve_subtree(state: _State, st: SubTreeDef, region: set, stats: DistanceStats | None):
    g, scores, cfg = state.g, state.scores, state.cfg
    P = scores.node_probs
    majors = [n for n, t in state.labels.items() if t == st.major_node]
    major = majors[0] if majors else None
    if major is None and st.major_node not in state.assigned:
        cands = major_candidates(state, st, region)
        if not cands:
            state.warn(f"{st.name}: no major-node candidates")
        else:
            vals = P[cands, st.major_node]
            best = cands[int(np.argmax(vals))]
            ok = float(P[best, st.major_node]) > cfg.thres
            state.selections.append(Selection(st.name, "major", st.major_node, best if ok else None,
                                              float(P[best, st.major_node]), tuple(cands)))
            if ok:
                major = best
                state.label(major, st.major_node, LEVEL2_MAJOR)
    use_edge = major is not None and float(P[major, st.major_node]) > cfg.thres

    comps = {int(state.comp[n]) for n in region}
    if major is not None:
        comps = {int(state.comp[major])}
    for j in st.branch_nodes:
        if j in state.assigned:
            continue
        e_j = st.expected_connecting_edge[j]
        pool = [n for n in range(g.n_nodes)
                if state.comp[n] in comps and state.unlabeled(n) and n != major
                and P[n, j] >= cfg.thres]
        if not pool:
            continue
        vals = [branch_objective(state, major, n, j, e_j, use_edge) for n in pool]
        bi = int(np.argmax(vals))
        cand = pool[bi]
        sel = Selection(st.name, "branch", j, cand, float(vals[bi]), tuple(pool), major, use_edge)
        state.selections.append(sel)
        if (use_edge and j in st.distance_guarded and stats is not None and stats.has(e_j)):
            dist = float(np.linalg.norm(g.pos[cand] - g.pos[major]))
            if dist > stats.upper_bound(e_j, cfg.distance_sigma_mult):
                sel.guarded = True
                _reinsert(state, st, major, cand, j, stats.mean[e_j])
                continue
        state.label(cand, j, LEVEL2_BRANCH)


def level2_resolve(scores: TypeScores, g: ArteryGraph, confident: dict, schema: AnatomySchema,
                   stats: DistanceStats | None, cfg: HRConfig | None = None, state: _State | None = None):
    """Resolve major and branch nodes per sub-tree; returns the working state."""
    cfg = cfg or HRConfig()
    if state is None:
        state = _State(g, scores, schema, cfg)
        for n, t in confident.items():
            state.label(n, t, LEVEL1)
    member = subtree_membership(g, state.adj, confident, schema)
    for idx, st in enumerate(schema.subtrees):
        region = {int(n) for n in np.flatnonzero(member == idx)}
        if not region:
            state.warn(f"{st.name}: no confident anchor nodes, sub-tree skipped")
            continue
        resolve_subtree(state, st, region, stats)
    return state


# ---------------------------------------------------------------------------
# level three


def _node_of(state: _State, t: int):
    for n, lab in state.labels.items():
        if lab == t:
            return n
    return None


def _label_path(state: _State, nodes, edges, edge_type):
    for k in edges:
        state.edge_override.setdefault(k, int(edge_type))
    for n in nodes[1:-1]:
        state.path_interior.add(int(n))
        if state.unlabeled(n):
            state.label(n, NON_TYPE, LEVEL3)


def _free_path(state: _State, a: int, targets: set):
    """Shortest path from ``a`` to any node of ``targets`` through unlabeled nodes only."""
    passable = {n for n in range(state.g.n_nodes) if state.unlabeled(n)}
    tr = PathTree(state.g, state.adj, a, passable)
    reach = [t for t in targets if t != a and tr.reaches(t)]
    if not reach:
        return None
    best = min(reach, key=lambda t: (tr.cost[t], t))
    return tr.nodes_to(best), tr.edges_to(best)


def _ica_axis(state: _State, ax: dict):
    root, major = _node_of(state, ax["root"]), _node_of(state, ax["major"])
    if root is None or major is None:
        return
    P = state.scores.node_probs
    axis_nodes = state.tree(root).nodes_to(major)
    axis_set = set(axis_nodes)

    # communicating artery to the posterior circulation
    pc_from = _node_of(state, ax["pcomm_from"])
    pc_node = _node_of(state, ax["pcomm_node"])
    if pc_from is not None:
        found = _free_path(state, pc_from, axis_set - {root} if pc_node is None else {pc_node})
        if found is not None:
            nodes, edges = found
            attach = nodes[-1]
            if attach != major and state.unlabeled(attach):
                state.label(attach, ax["pcomm_node"], LEVEL3)
            _label_path(state, nodes, edges, ax["pcomm_edge"])

    # ophthalmic origin: best interior axis node
    oa_node = _node_of(state, ax["oa_node"])
    if oa_node is None and ax["oa_node"] not in state.assigned:
        interior = [n for n in axis_nodes[1:-1] if state.unlabeled(n)]
        if interior:
            oa_node = interior[int(np.argmax(P[interior, ax["oa_node"]]))]
            state.label(oa_node, ax["oa_node"], LEVEL3)
    if oa_node is None:
        return
    pe = state.scores.edge_probs
    side = [(v, k) for v, k in state.adj[oa_node] if v not in axis_set and k not in state.edge_override]
    if not side:
        return
    v, k = max(side, key=lambda vk: (pe[vk[1], ax["oa_edge"]], -vk[1]))
    state.edge_override[k] = ax["oa_edge"]
    if state.unlabeled(v) and state.g.degree[v] == 1 and ax["oa_end"] not in state.assigned:
        state.label(v, ax["oa_end"], LEVEL3)


def _communicating(state: _State, rule: dict):
    a, b = _node_of(state, rule["a"]), _node_of(state, rule["b"])
    if a is None or b is None:
        return
    found = _free_path(state, a, {b})
    if found is not None:
        _label_path(state, found[0], found[1], rule["edge"])


def _roots(state: _State, rule: dict):
    parent = _node_of(state, rule["parent"])
    if parent is None:
        return
    types = [t for t in rule["nodes"] if t not in state.assigned]
    cands = sorted({v for v, _ in state.adj[parent] if state.unlabeled(v)})
    if not types or not cands:
        return
    P = state.scores.node_probs
    thres = state.cfg.thres
    best, best_val = None, -1.0
    slots = cands + [None] * len(types)
    for combo in itertools.permutations(slots, len(types)):
        nodes = [c for c in combo if c is not None]
        if len(set(nodes)) != len(nodes):
            continue
        if any(c is not None and P[c, t] < thres for c, t in zip(combo, types)):
            continue
        val = sum(float(P[c, t]) for c, t in zip(combo, types) if c is not None)
        if val > best_val:
            best, best_val = combo, val
    for c, t in zip(best or (), types):
        if c is not None:
            state.label(c, t, LEVEL3)


def _segment_paths(state: _State):
    """Label pass-through paths (via unlabeled nodes) between two labeled ends of one segment."""
    typed = sorted((n, t) for n, t in state.labels.items() if t != NON_TYPE)
    where = {t: n for n, t in typed}
    pairs = sorted((tuple(sorted(k)), e) for k, e in state.schema.segment_between.items())
    for (ta, tb), e in pairs:
        if ta not in where or tb not in where:
            continue
        a, b = where[ta], where[tb]
        if any(v == b for v, _ in state.adj[a]):
            continue
        found = _free_path(state, a, {b})
        if found is not None:
            _label_path(state, found[0], found[1], e)


def _side_branches(state: _State):
    """Branches leaving the interior of a resolved segment that reach no labeled
    anatomical node are unnamed vessels: their edges become Non_Type."""
    for x in sorted(state.path_interior):
        for v, k in state.adj[x]:
            if k in state.edge_override or v in state.path_interior:
                continue
            seen, edges, q = {v}, {k}, deque([v])
            clean = state.unlabeled(v)
            while q and clean:
                y = q.popleft()
                for z, kk in state.adj[y]:
                    if kk in edges:
                        continue
                    if z in seen or z == x or not state.unlabeled(z) or kk in state.edge_override:
                        clean = False
                        break
                    edges.add(kk)
                    seen.add(z)
                    q.append(z)
            if not clean:
                continue
            for kk in sorted(edges):
                state.edge_override[kk] = NON_TYPE
            for y in sorted(seen):
                state.label(y, NON_TYPE, LEVEL3)


def _distal(state: _State, rule: dict):
    u = _node_of(state, rule["node"])
    if u is None:
        return
    schema = state.schema
    proximal = set(schema.canonical_incident.get(rule["node"], ())) - {rule["edge"]}
    te = state.scores.edge_argmax
    for v, k in state.adj[u]:
        if k in state.edge_override or te[k] in proximal:
            continue
        seen, edges, q = {u, v}, {k}, deque([v])
        clean = state.labels.get(v, NON_TYPE) == NON_TYPE
        while q and clean:
            x = q.popleft()
            for y, kk in state.adj[x]:
                if y == u and kk == k:
                    continue
                edges.add(kk)
                if y in seen:
                    continue
                if y == u or state.labels.get(y, NON_TYPE) != NON_TYPE:
                    clean = False
                    break
                seen.add(y)
                q.append(y)
        if not clean:
            continue
        for kk in sorted(edges):
            state.edge_override.setdefault(kk, rule["edge"])
        for x in sorted(seen - {u}):
            if state.unlabeled(x):
                state.label(x, NON_TYPE, LEVEL3)


def _residual_typed(state: _State):
    """Give remaining nodes their network argmax when that type is still free and likely."""
    P = state.scores.node_probs
    tn = state.scores.node_argmax
    rest = [n for n in range(state.g.n_nodes) if state.unlabeled(n) and tn[n] != NON_TYPE]
    rest.sort(key=lambda n: (-float(P[n, tn[n]]), n))
    for n in rest:
        t = int(tn[n])
        if t not in state.assigned and float(P[n, t]) > state.cfg.residual_min_prob:
            state.label(n, t, GNN)


def level3_optional(state: _State):
    level3 = state.schema.level3
    for ax in level3.get("ica_axes", []):
        _ica_axis(state, ax)
    for rule in level3.get("communicating", []):
        _communicating(state, rule)
    for rule in level3.get("roots", []):
        _roots(state, rule)
    _residual_typed(state)
    _segment_paths(state)
    _side_branches(state)
    for rule in level3.get("distal", []):
        _distal(state, rule)
    for n in range(state.g.n_nodes):
        if state.unlabeled(n):
            state.label(n, NON_TYPE, LEVEL3)
    return state


# ---------------------------------------------------------------------------
# edges and entry points


def derive_edge_labels(node_labels, g: ArteryGraph, schema: AnatomySchema, edge_argmax,
                       overrides: dict | None = None, unmatched: str = "gnn") -> np.ndarray:
    """Edge types from node labels: override, else the schema segment between the two
    labeled ends, else the network's edge argmax."""
    overrides = overrides or {}
    out = np.asarray(edge_argmax, dtype=np.int64).copy()
    for k, (r, s) in enumerate(g.edges):
        if k in overrides:
            out[k] = overrides[k]
            continue
        a, b = int(node_labels[r]), int(node_labels[s])
        if a == NON_TYPE or b == NON_TYPE:
            continue
        seg = schema.segment_for(a, b)
        if seg is not None:
            out[k] = seg
        elif unmatched == "non_type":
            out[k] = NON_TYPE
    return out


def _result(state: _State) -> LabelingResult:
    g = state.g
    labels = np.array([state.labels[n] for n in range(g.n_nodes)], dtype=np.int64)
    edges = derive_edge_labels(labels, g, state.schema, state.scores.edge_argmax,
                               state.edge_override, state.cfg.unmatched_segment)
    prob = state.scores.node_probs[np.arange(g.n_nodes), labels] if g.n_nodes else np.zeros(0)
    return LabelingResult(labels, edges, [state.prov[n] for n in range(g.n_nodes)],
                          list(state.reinserted), list(state.selections), list(state.warnings), prob)


def hierarchical_refine(scores: TypeScores, g: ArteryGraph, schema: AnatomySchema,
                        stats: DistanceStats | None = None, cfg: HRConfig | None = None) -> LabelingResult:
    cfg = cfg or HRConfig()
    confident = level1_confident(scores, g, schema)
    state = level2_resolve(scores, g, confident, schema, stats, cfg)
    level3_optional(state)
    return _result(state)


def gnn_only_result(scores: TypeScores, g: ArteryGraph) -> LabelingResult:
    """Raw argmax labels (no refinement)."""
    return LabelingResult(scores.node_argmax.astype(np.int64).copy(), scores.edge_argmax.astype(np.int64).copy(),
                          [GNN] * g.n_nodes, node_prob=scores.node_probs.max(axis=1) if g.n_nodes else np.zeros(0))

