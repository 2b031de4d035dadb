"""File formats: centerline records, graph exports, JSON helpers.

All formats are documented in ``docs/formats.md``. Floats are written with
``repr`` precision so every file round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .anatomy import AnatomySchema
from .errors import InputError
from .vessel_graph import ArteryGraph, CenterlineSet

CENTERLINE_FORMAT = "artlabel-centerlines"
GRAPH_FORMAT = "artlabel-graph"
FORMAT_VERSION = 1


def dump_json(obj, path, indent=None):
    """Deterministic JSON writer (sorted keys, trailing newline)."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=indent, sort_keys=True, allow_nan=False)
        f.write("\n")
    os.replace(tmp, path)


def load_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def centerlines_to_lines(cl: CenterlineSet, schema: AnatomySchema) -> list[str]:
    header = {
        "record": "header",
        "format": CENTERLINE_FORMAT,
        "format_version": FORMAT_VERSION,
        "case_id": cl.case_id,
        "schema_version": cl.schema_version or schema.schema_version,
        "resolution": [float(v) for v in cl.resolution],
        "labels": cl.has_labels,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i, poly in enumerate(cl.polylines):
        rec = {"record": "polyline", "points": [[float(v) for v in row] for row in poly]}
        if cl.has_labels:
            rec["label"] = schema.edge_names[int(cl.edge_labels[i])]
            nl = cl.node_labels[i] if cl.node_labels is not None else {}
            rec["node_labels"] = {str(int(k)): schema.node_names[int(v)] for k, v in sorted(nl.items())}
        lines.append(json.dumps(rec, sort_keys=True))
    return lines


def write_centerlines(cl: CenterlineSet, path, schema: AnatomySchema):
    with open(path, "w", encoding="utf-8") as f:
        for line in centerlines_to_lines(cl, schema):
            f.write(line + "\n")


def read_centerlines(path, schema: AnatomySchema) -> CenterlineSet:
    """Parse a centerline file (one JSON record per line, header first)."""
    with open(path, encoding="utf-8") as f:
        raw_lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not raw_lines:
        raise InputError(f"{path}: empty centerline file")
    records = []
    for n, ln in enumerate(raw_lines, start=1):
        try:
            records.append(json.loads(ln))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{n}: {exc.msg}") from exc
    header = records[0]
    if header.get("record") != "header" or header.get("format") != CENTERLINE_FORMAT:
        raise InputError(f"{path}:1: first record must be a {CENTERLINE_FORMAT} header")
    labeled = bool(header.get("labels", False))
    polylines, edge_labels, node_labels = [], [], []
    for n, rec in enumerate(records[1:], start=2):
        if rec.get("record") != "polyline":
            raise InputError(f"{path}:{n}: expected a polyline record")
        pts = np.asarray(rec.get("points", []), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise InputError(f"{path}:{n}: points must be [x, y, z, radius] rows")
        polylines.append(pts)
        if labeled:
            try:
                edge_labels.append(schema.edge_id(rec["label"]))
                node_labels.append({int(k): schema.node_id(v) for k, v in rec.get("node_labels", {}).items()})
            except KeyError as exc:
                raise InputError(f"{path}:{n}: {exc}") from exc
    cl = CenterlineSet(
        polylines=polylines,
        resolution=np.asarray(header.get("resolution", [1.0, 1.0, 1.0]), dtype=np.float64),
        edge_labels=edge_labels if labeled else None,
        node_labels=node_labels if labeled else None,
        case_id=str(header.get("case_id", os.path.basename(str(path)))),
        schema_version=header.get("schema_version"),
    )
    cl.validate()
    return cl


def graph_to_dict(g: ArteryGraph, schema: AnatomySchema | None = None) -> dict:
    def name(names, v):
        return names[int(v)] if schema is not None else int(v)

    nodes = []
    for i in range(g.n_nodes):
        rec = {
            "index": i,
            "position": [float(v) for v in g.pos[i]],
            "radius": float(g.radius[i]),
            "degree": int(g.degree[i]),
            "direction_bits": [int(b) for b in np.flatnonzero(g.dir_emb[i])],
        }
        if g.node_gt is not None:
            rec["label"] = name(schema.node_names if schema else None, g.node_gt[i])
        nodes.append(rec)
    edges = []
    for k in range(g.n_edges):
        rec = {
            "index": k,
            "r": int(g.edges[k, 0]),
            "s": int(g.edges[k, 1]),
            "direction": [float(v) for v in g.edge_dir[k]],
            "distance": float(g.edge_dist[k]),
            "mean_radius": float(g.edge_radius[k]),
            "chain": [[float(v) for v in row] for row in g.chains[k]],
        }
        if g.edge_gt is not None:
            names = schema.edge_names if schema else None
            rec["label"] = name(names, g.edge_gt[k])
            rec["end_labels"] = [name(names, v) for v in g.edge_gt_ends[k]]
            rec["chain_labels"] = [name(names, v) for v in g.chain_labels[k]]
        edges.append(rec)
    return {
        "format": GRAPH_FORMAT,
        "format_version": FORMAT_VERSION,
        "case_id": g.case_id,
        "schema_version": g.schema_version,
        "nodes": nodes,
        "edges": edges,
    }


def graph_from_dict(d: dict, schema: AnatomySchema | None = None) -> ArteryGraph:
    nodes, edges = d["nodes"], d["edges"]

    def nid(v):
        return schema.node_id(v) if isinstance(v, str) else int(v)

    def eid(v):
        return schema.edge_id(v) if isinstance(v, str) else int(v)

    dir_emb = np.zeros((len(nodes), 26), dtype=np.uint8)
    for i, n in enumerate(nodes):
        dir_emb[i, n["direction_bits"]] = 1
    labeled = bool(nodes) and "label" in nodes[0]
    return ArteryGraph(
        pos=np.array([n["position"] for n in nodes], dtype=np.float64).reshape(-1, 3),
        radius=np.array([n["radius"] for n in nodes], dtype=np.float64),
        degree=np.array([n["degree"] for n in nodes], dtype=np.int64),
        dir_emb=dir_emb,
        edges=np.array([[e["r"], e["s"]] for e in edges], dtype=np.int64).reshape(-1, 2),
        edge_dir=np.array([e["direction"] for e in edges], dtype=np.float64).reshape(-1, 3),
        edge_dist=np.array([e["distance"] for e in edges], dtype=np.float64),
        edge_radius=np.array([e["mean_radius"] for e in edges], dtype=np.float64),
        chains=[np.array(e["chain"], dtype=np.float64) for e in edges],
        node_gt=np.array([nid(n["label"]) for n in nodes], dtype=np.int64) if labeled else None,
        edge_gt=np.array([eid(e["label"]) for e in edges], dtype=np.int64) if labeled else None,
        edge_gt_ends=np.array([[eid(v) for v in e["end_labels"]] for e in edges], dtype=np.int64).reshape(-1, 2) if labeled else None,
        chain_labels=[np.array([eid(v) for v in e["chain_labels"]], dtype=np.int64) for e in edges] if labeled else None,
        case_id=d.get("case_id", ""),
        schema_version=d.get("schema_version"),
    )
