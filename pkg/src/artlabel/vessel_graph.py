"""Centerline ingestion and the attributed relational artery graph.

Traced centerlines are point sequences with per-point radius. Points shared
between polylines (exact coordinate equality) are junctions. Contraction
keeps only points whose degree in the dense point graph is not 2, and each
maximal run of pass-through points becomes a single edge whose original
points are kept as a chain.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FeatureError, GraphStructureError, InputError

logger = logging.getLogger(__name__)

N_DIRECTIONS = 26
NODE_FEATURE_DIM = 3 + 1 + N_DIRECTIONS
EDGE_FEATURE_DIM = 3 + 1 + 1

# sin/cos of k*45 degrees without floating-point residue at the poles.
_H = math.sqrt(0.5)
_SIN45 = (0.0, _H, 1.0, _H, 0.0, -_H, -1.0, -_H)


def _sin45(k: int) -> float:
    return _SIN45[k % 8]


def _cos45(k: int) -> float:
    return _SIN45[(k + 2) % 8]


def build_codebook() -> np.ndarray:
    """The 26 major 3D directions, 45 degrees apart on each axis.

    Enumerates azimuth step ``a`` in 0..7 (outer) and elevation step ``b`` in
    -2..2 (inner) as ``(sin a cos b, cos a cos b, sin b)`` and keeps the first
    occurrence of each vector, so both poles appear once.

    Returns
    -------
    np.ndarray
        Array of shape (26, 3).
    """
    seen = []
    for a in range(8):
        for b in range(-2, 3):
            v = (_sin45(a) * _cos45(b) + 0.0, _cos45(a) * _cos45(b) + 0.0, _sin45(b) + 0.0)
            if v not in seen:
                seen.append(v)
    out = np.array(seen, dtype=np.float64)
    assert out.shape == (N_DIRECTIONS, 3)
    return out


CODEBOOK = build_codebook()
CODEBOOK.setflags(write=False)


def match_direction(v: np.ndarray, codebook: np.ndarray = CODEBOOK) -> int:
    """Index of the codebook direction with the largest dot product (lowest index on ties)."""
    return int(np.argmax(codebook @ v))


def canonical_direction(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so that z > 0, or on z == 0 so that y > 0, or on y == 0 so that x > 0."""
    x, y, z = v
    if z < 0 or (z == 0 and (y < 0 or (y == 0 and x < 0))):
        v = -v
    return v + 0.0


@dataclass(frozen=True)
class EdgeFeatures:
    direction: np.ndarray
    distance: float
    mean_radius: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.direction, [self.distance, self.mean_radius]])


def edge_features(pa, ra, pb, rb) -> EdgeFeatures:
    delta = np.asarray(pb, dtype=np.float64) - np.asarray(pa, dtype=np.float64)
    d = float(np.linalg.norm(delta))
    if d == 0.0:
        raise FeatureError("edge endpoints coincide")
    return EdgeFeatures(canonical_direction(delta / d), d, (float(ra) + float(rb)) / 2.0)


def direction_embedding(node: int, pos: np.ndarray, neighbors) -> np.ndarray:
    """26-bit multi-label encoding of the directions from ``node`` to its neighbours."""
    bits = np.zeros(N_DIRECTIONS, dtype=np.uint8)
    for nb in neighbors:
        delta = pos[nb] - pos[node]
        norm = np.linalg.norm(delta)
        if norm == 0.0:
            raise FeatureError(f"zero-length direction at node {node}")
        bits[match_direction(delta / norm)] = 1
    return bits


# ---------------------------------------------------------------------------
# centerlines


@dataclass
class CenterlineSet:
    """Traced polylines, each an (n, 4) array of ``x, y, z, radius``.

    ``edge_labels[i]`` is the segment type of polyline ``i``;
    ``node_labels[i]`` maps point indices of polyline ``i`` to node types.
    Positions are voxel coordinates until :func:`normalize_positions` is
    applied; radii are always millimeters.
    """

    polylines: list
    resolution: np.ndarray = field(default_factory=lambda: np.ones(3))
    edge_labels: list | None = None
    node_labels: list | None = None
    case_id: str = ""
    schema_version: str | None = None
    normalized: bool = False

    def __post_init__(self):
        self.polylines = [np.asarray(p, dtype=np.float64).reshape(-1, 4) for p in self.polylines]
        self.resolution = np.asarray(self.resolution, dtype=np.float64).reshape(3)

    @property
    def has_labels(self) -> bool:
        return self.edge_labels is not None

    def validate(self):
        if not self.polylines:
            raise InputError(f"case {self.case_id!r}: no polylines")
        for i, p in enumerate(self.polylines):
            if len(p) < 2:
                raise InputError(f"case {self.case_id!r}: polyline {i} has fewer than 2 points")
            if not np.all(np.isfinite(p)):
                raise InputError(f"case {self.case_id!r}: polyline {i} has non-finite values")
            if np.any(p[:, 3] <= 0):
                raise InputError(f"case {self.case_id!r}: polyline {i} has non-positive radius")

    def reversed(self) -> CenterlineSet:
        """Same anatomy with every polyline traversed backwards."""
        node_labels = None
        if self.node_labels is not None:
            node_labels = [{len(p) - 1 - k: v for k, v in nl.items()}
                           for p, nl in zip(self.polylines, self.node_labels)]
        return dataclasses.replace(self, polylines=[p[::-1].copy() for p in self.polylines],
                                   node_labels=node_labels)


def normalize_positions(cl: CenterlineSet) -> CenterlineSet:
    """Scale voxel positions to millimeters and center the unique point cloud at the origin."""
    res = cl.resolution
    if np.any(res <= 0) or not np.all(np.isfinite(res)):
        raise InputError(f"resolution must be positive, got {res.tolist()}")
    scaled = [np.column_stack([p[:, :3] * res, p[:, 3]]) for p in cl.polylines]
    pts = np.unique(np.concatenate([p[:, :3] for p in scaled]), axis=0)
    centroid = pts.mean(axis=0)
    moved = [np.column_stack([p[:, :3] - centroid, p[:, 3]]) for p in scaled]
    return dataclasses.replace(cl, polylines=moved, resolution=np.ones(3), normalized=True)


# ---------------------------------------------------------------------------
# graph


@dataclass
class ArteryGraph:
    """Contracted centerline graph: bifurcations and endpoints joined by vessel chains.

    Underlying arrays:
      pos (N, 3), radius (N,), degree (N,), dir_emb (N, 26)
      edges (E, 2) with edges[k] = (r_k, s_k), r_k < s_k
      edge_dir (E, 3), edge_dist (E,), edge_radius (E,)
      chains: list of (L_k, 4) point arrays ordered from r_k to s_k
    Ground truth (optional): node_gt (N,), edge_gt (E,) the chain label
    (for a mixed chain: the segment at its only labeled end, otherwise the
    arc-length majority), edge_gt_ends (E, 2) the segment label touching each
    endpoint, chain_labels per-segment labels of each chain.
    """

    pos: np.ndarray
    radius: np.ndarray
    degree: np.ndarray
    dir_emb: np.ndarray
    edges: np.ndarray
    edge_dir: np.ndarray
    edge_dist: np.ndarray
    edge_radius: np.ndarray
    chains: list
    node_gt: np.ndarray | None = None
    edge_gt: np.ndarray | None = None
    edge_gt_ends: np.ndarray | None = None
    chain_labels: list | None = None
    case_id: str = ""
    schema_version: str | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.pos)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def labeled(self) -> bool:
        return self.node_gt is not None and self.edge_gt is not None

    def node_features(self, direction: bool = True) -> np.ndarray:
        emb = self.dir_emb.astype(np.float64)
        if not direction:
            emb = np.zeros_like(emb)
        return np.column_stack([self.pos, self.radius, emb])

    def edge_features(self) -> np.ndarray:
        return np.column_stack([self.edge_dir, self.edge_dist, self.edge_radius])

    def incident(self) -> list:
        """incident[i] = list of (edge index, neighbour) in edge order."""
        out = [[] for _ in range(self.n_nodes)]
        for k, (r, s) in enumerate(self.edges):
            out[r].append((k, int(s)))
            out[s].append((k, int(r)))
        return out

    def arc_length(self, k: int) -> float:
        c = self.chains[k][:, :3]
        return float(np.linalg.norm(np.diff(c, axis=0), axis=1).sum())

    def cycle_rank(self) -> int:
        return self.n_edges - self.n_nodes + n_components(self.n_nodes, self.edges)

    def with_positions(self, pos: np.ndarray) -> ArteryGraph:
        return dataclasses.replace(self, pos=np.asarray(pos, dtype=np.float64))


def n_components(n: int, edges) -> int:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for r, s in edges:
        a, b = find(int(r)), find(int(s))
        if a != b:
            parent[a] = b
    return len({find(i) for i in range(n)})


def _dense_graph(cl: CenterlineSet):
    """Unique points (first-seen order), adjacency sets and per-pair segment labels."""
    key_to_id = {}
    coords, radii = [], []
    point_label = {}
    adj = []
    seg_label = {}
    labeled = cl.has_labels
    for pi, poly in enumerate(cl.polylines):
        ids = []
        for row in poly:
            key = (float(row[0]), float(row[1]), float(row[2]))
            idx = key_to_id.get(key)
            if idx is None:
                idx = len(coords)
                key_to_id[key] = idx
                coords.append(key)
                radii.append(float(row[3]))
                adj.append(set())
            else:
                radii[idx] = max(radii[idx], float(row[3]))
            ids.append(idx)
        if labeled and cl.node_labels is not None:
            for k, lab in cl.node_labels[pi].items():
                idx = ids[int(k)]
                if lab:
                    point_label[idx] = min(point_label.get(idx, lab), int(lab))
        for a, b in zip(ids[:-1], ids[1:]):
            if a == b:
                continue
            adj[a].add(b)
            adj[b].add(a)
            if labeled:
                pair = (min(a, b), max(a, b))
                lab = int(cl.edge_labels[pi])
                seg_label[pair] = min(seg_label.get(pair, lab), lab)
    return np.array(coords, dtype=np.float64).reshape(-1, 3), np.array(radii), adj, point_label, seg_label


def _walk_chains(adj, retained):
    """Follow every pass-through run from each retained point; returns point-id chains."""
    visited = set()
    chains = []
    for u in sorted(retained):
        for v in sorted(adj[u]):
            if (u, v) in visited:
                continue
            chain = [u]
            prev, cur = u, v
            while True:
                visited.add((prev, cur))
                visited.add((cur, prev))
                chain.append(cur)
                if cur in retained:
                    break
                nxt = [w for w in adj[cur] if w != prev]
                prev, cur = cur, nxt[0]
            chains.append(chain)
    return chains, visited


def contract(cl: CenterlineSet) -> ArteryGraph:
    """Contract degree-2 points; compute node and edge features and carry ground truth.

    Raises
    ------
    GraphStructureError
        If a closed loop consists only of degree-2 points.
    """
    cl.validate()
    coords, radii, adj, point_label, seg_label = _dense_graph(cl)
    retained = {i for i in range(len(coords)) if len(adj[i]) != 2}

    while True:
        chains, visited = _walk_chains(adj, retained)
        orphans = [i for i in range(len(coords)) if i not in retained
                   and any((i, j) not in visited for j in adj[i])]
        if orphans:
            p = coords[orphans[0]]
            raise GraphStructureError(
                f"closed loop of {len(orphans)} degree-2 points without a bifurcation "
                f"(first point at {p.tolist()}) in case {cl.case_id!r}")
        seen_pairs = set()
        promote = []
        for ch in chains:
            pair = (min(ch[0], ch[-1]), max(ch[0], ch[-1]))
            if ch[0] == ch[-1] or pair in seen_pairs:
                promote.append(ch[len(ch) // 2])
            seen_pairs.add(pair)
        if not promote:
            break
        logger.warning("case %r: splitting %d looped/parallel chains at their midpoint",
                       cl.case_id, len(promote))
        retained.update(promote)

    # canonical node order: lexicographic by position, independent of polyline orientation
    order = sorted(retained, key=lambda i: tuple(coords[i]))
    index = {pid: n for n, pid in enumerate(order)}
    records = []
    for ch in chains:
        a, b = index[ch[0]], index[ch[-1]]
        if a > b:
            ch = ch[::-1]
            a, b = b, a
        records.append((a, b, ch))
    # each chain is found twice (once from each end); keep one per pair
    unique = {}
    for a, b, ch in records:
        unique.setdefault((a, b), ch)
    keys = sorted(unique)

    pos = coords[order]
    radius = radii[order]
    n = len(order)
    edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
    chain_arrays = []
    edir = np.zeros((len(keys), 3))
    edist = np.zeros(len(keys))
    erad = np.zeros(len(keys))
    for k, (a, b) in enumerate(keys):
        ch = unique[(a, b)]
        chain_arrays.append(np.column_stack([coords[ch], radii[ch]]))
        f = edge_features(pos[a], radius[a], pos[b], radius[b])
        edir[k], edist[k], erad[k] = f.direction, f.distance, f.mean_radius
    degree = np.zeros(n, dtype=np.int64)
    nbrs = [[] for _ in range(n)]
    for a, b in keys:
        degree[a] += 1
        degree[b] += 1
        nbrs[a].append(b)
        nbrs[b].append(a)
    dir_emb = np.array([direction_embedding(i, pos, nbrs[i]) for i in range(n)], dtype=np.uint8).reshape(n, N_DIRECTIONS)

    node_gt = edge_gt = edge_ends = chain_labels = None
    if cl.has_labels:
        node_gt = np.array([point_label.get(pid, 0) for pid in order], dtype=np.int64)
        edge_gt = np.zeros(len(keys), dtype=np.int64)
        edge_ends = np.zeros((len(keys), 2), dtype=np.int64)
        chain_labels = []
        for k, key in enumerate(keys):
            ch = unique[key]
            labs = np.array([seg_label[(min(p, q), max(p, q))] for p, q in zip(ch[:-1], ch[1:])], dtype=np.int64)
            seglen = np.linalg.norm(np.diff(coords[ch], axis=0), axis=1)
            totals = {}
            for lab, ln in zip(labs.tolist(), seglen.tolist()):
                totals[lab] = totals.get(lab, 0.0) + ln
            edge_ends[k] = (labs[0], labs[-1])
            # a mixed chain is named after the segment leaving its single labeled end
            named = [bool(node_gt[key[0]]), bool(node_gt[key[1]])]
            if len(totals) > 1 and named[0] != named[1]:
                edge_gt[k] = labs[0] if named[0] else labs[-1]
            else:
                edge_gt[k] = min(totals, key=lambda t: (-totals[t], t))
            chain_labels.append(labs)

    return ArteryGraph(
        pos=pos, radius=radius, degree=degree, dir_emb=dir_emb,
        edges=edges, edge_dir=edir, edge_dist=edist, edge_radius=erad,
        chains=chain_arrays, node_gt=node_gt, edge_gt=edge_gt, edge_gt_ends=edge_ends,
        chain_labels=chain_labels, case_id=cl.case_id, schema_version=cl.schema_version,
    )


def build_graph(cl: CenterlineSet) -> ArteryGraph:
    """Normalize (if needed) and contract."""
    cl.validate()
    if not cl.normalized:
        cl = normalize_positions(cl)
    return contract(cl)


def expand(g: ArteryGraph) -> CenterlineSet:
    """Dense centerlines reproducing ``g``: one polyline per stored chain."""
    edge_labels = node_labels = None
    polylines = []
    if g.chain_labels is not None:
        edge_labels, node_labels = [], []
    for k, ch in enumerate(g.chains):
        if g.chain_labels is None:
            polylines.append(ch)
            continue
        # split the chain wherever the segment label changes
        labs = g.chain_labels[k]
        start = 0
        for j in range(1, len(labs) + 1):
            if j == len(labs) or labs[j] != labs[start]:
                polylines.append(ch[start:j + 1])
                edge_labels.append(int(labs[start]))
                node_labels.append({})
                start = j
    if node_labels is not None:
        ends = {}
        for i in range(g.n_nodes):
            ends[tuple(g.pos[i])] = int(g.node_gt[i])
        for p, nl in zip(polylines, node_labels):
            for idx in (0, len(p) - 1):
                lab = ends.get(tuple(p[idx, :3]))
                if lab:
                    nl[idx] = lab
    return CenterlineSet(polylines=polylines, edge_labels=edge_labels, node_labels=node_labels,
                         case_id=g.case_id, schema_version=g.schema_version, normalized=True)
