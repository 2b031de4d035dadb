"""Per-scan and aggregate labeling metrics, bifurcation detection report, and emitters."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .anatomy import AnatomySchema
from .errors import InputError
from .vessel_graph import ArteryGraph

SCAN_COLUMNS = ("case_id", "method", "node_acc", "node_wrong", "n_evaluable", "edge_acc",
                "node_solve", "edge_solve", "cow_node_solve", "processing_seconds")
SUMMARY_COLUMNS = ("method", "node_acc", "node_wrong", "node_solve", "cow_node_solve",
                   "edge_acc", "edge_solve", "processing_seconds")
SUMMARY_HEADERS = ("Method", "Node_Acc", "Node_Wrong", "Node_Solve", "CoW_Node_Solve",
                   "Edge_Acc", "Edge_Solve", "Process time (s)")
BIFURCATION_COLUMNS = ("group", "tp", "fp", "fn", "tn", "accuracy", "precision", "recall")
TIMING_COLUMNS = ("processing_seconds",)
UNDEFINED = "undefined"


def communicating_edge_types(schema: AnatomySchema) -> set:
    l3 = schema.level3
    out = {r["edge"] for r in l3.get("communicating", [])}
    out |= {ax["pcomm_edge"] for ax in l3.get("ica_axes", [])}
    return out


def default_exclusion(g: ArteryGraph, schema: AnatomySchema) -> set:
    """Degree-2 ground-truth nodes of a distance-guarded type with no true communicating artery."""
    guarded = {t for st in schema.subtrees for t in st.distance_guarded}
    comm = communicating_edge_types(schema)
    incident = [set() for _ in range(g.n_nodes)]
    for k, (r, s) in enumerate(g.edges):
        incident[r].add(int(g.edge_gt[k]))
        incident[s].add(int(g.edge_gt[k]))
    return {i for i in range(g.n_nodes)
            if g.degree[i] == 2 and int(g.node_gt[i]) in guarded and not (incident[i] & comm)}


@dataclass
class ScanMetrics:
    case_id: str
    node_acc: float
    node_wrong: int
    n_evaluable: int
    edge_acc: float
    node_solve: bool
    edge_solve: bool
    cow_node_solve: bool
    processing_seconds: float = 0.0
    method: str = ""

    def row(self) -> dict:
        return asdict(self)


def score_scan(pred_nodes, pred_edges, g: ArteryGraph, schema: AnatomySchema,
               exclude: Callable | None = default_exclusion, processing_seconds: float = 0.0,
               method: str = "") -> ScanMetrics:
    """Compare predicted node/edge labels with the ground truth carried by ``g``."""
    pn = np.asarray(pred_nodes, dtype=np.int64)
    pe = np.asarray(pred_edges, dtype=np.int64)
    if g.node_gt is None:
        raise InputError(f"case {g.case_id!r}: no ground truth")
    if pn.shape != (g.n_nodes,) or pe.shape != (g.n_edges,):
        raise InputError(f"case {g.case_id!r}: prediction covers {pn.size} nodes / {pe.size} edges, "
                         f"graph has {g.n_nodes} / {g.n_edges}")
    excluded = exclude(g, schema) if exclude is not None else set()
    keep = np.array([i not in excluded for i in range(g.n_nodes)], dtype=bool)
    correct = (pn == g.node_gt) & keep
    n_eval = int(keep.sum())
    wrong = n_eval - int(correct.sum())
    edge_ok = pe == g.edge_gt
    cow = keep & np.isin(g.node_gt, sorted(schema.cow_node_types))
    return ScanMetrics(
        case_id=g.case_id,
        node_acc=float(correct.sum()) / n_eval if n_eval else 1.0,
        node_wrong=wrong,
        n_evaluable=n_eval,
        edge_acc=float(edge_ok.mean()) if g.n_edges else 1.0,
        node_solve=wrong == 0,
        edge_solve=bool(edge_ok.all()),
        cow_node_solve=bool(np.all(pn[cow] == g.node_gt[cow])),
        processing_seconds=float(processing_seconds),
        method=method,
    )


@dataclass
class SummaryRow:
    method: str
    node_acc: float
    node_wrong: float
    node_solve: float
    cow_node_solve: float
    edge_acc: float
    edge_solve: float
    processing_seconds: float
    n_scans: int = 0

    def values(self) -> list:
        return [getattr(self, c) for c in SUMMARY_COLUMNS]


def aggregate(scans, method: str = "") -> SummaryRow:
    if not scans:
        raise ValueError("aggregate needs at least one scan")

    def mean(attr):
        return math.fsum(float(getattr(s, attr)) for s in scans) / len(scans)

    return SummaryRow(
        method=method or scans[0].method,
        node_acc=mean("node_acc"),
        node_wrong=mean("node_wrong"),
        node_solve=mean("node_solve"),
        cow_node_solve=mean("cow_node_solve"),
        edge_acc=mean("edge_acc"),
        edge_solve=mean("edge_solve"),
        processing_seconds=mean("processing_seconds"),
        n_scans=len(scans),
    )


def format_summary_row(row: SummaryRow, digits: int = 4) -> str:
    """Tab-separated row in the published table layout (Node_Wrong with one decimal,
    time with three)."""
    cells = [row.method, f"{row.node_acc:.{digits}f}", f"{row.node_wrong:.1f}",
             f"{row.node_solve:.{digits}f}", f"{row.cow_node_solve:.{digits}f}",
             f"{row.edge_acc:.{digits}f}", f"{row.edge_solve:.{digits}f}",
             f"{row.processing_seconds:.3f}"]
    return "\t".join(cells)


def parse_summary_row(line: str) -> SummaryRow:
    parts = [p.strip() for p in line.strip().split("\t")]
    if len(parts) != len(SUMMARY_COLUMNS):
        raise ValueError(f"expected {len(SUMMARY_COLUMNS)} tab-separated fields, got {len(parts)}")
    nums = []
    for p in parts[1:]:
        v = float(p)
        nums.append(0.0 if v == 0 else v)
    return SummaryRow(parts[0], *nums)


# ---------------------------------------------------------------------------
# bifurcation detection


@dataclass
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.total if self.total else None

    @property
    def precision(self) -> float | None:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None


@dataclass
class BifurcationReport:
    groups: dict = field(default_factory=dict)  # name -> DetectionCounts

    def rows(self) -> list:
        out = []
        for name, c in self.groups.items():
            out.append({"group": name, "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
                        "accuracy": c.accuracy, "precision": c.precision, "recall": c.recall})
        return out

    def mean(self, attr: str) -> float | None:
        vals = [getattr(c, attr) for c in self.groups.values()]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None


def bifurcation_report(preds, truths, groups: dict, excluded=None) -> BifurcationReport:
    """Detection counts per group of node types, pooled over scans.

    For each member type, TP/FP/FN/TN are read off the node confusion matrix
    (one-vs-rest); a group sums the counts of its member types. ``excluded``
    optionally holds per-scan sets of node indices to skip.
    """
    rep = BifurcationReport({name: DetectionCounts() for name in groups})
    for s, (p, t) in enumerate(zip(preds, truths)):
        p = np.asarray(p)
        t = np.asarray(t)
        keep = np.ones(len(t), dtype=bool)
        if excluded is not None:
            keep[sorted(excluded[s])] = False
        p, t = p[keep], t[keep]
        for name, types in groups.items():
            c = rep.groups[name]
            for ty in types:
                pt, tt = p == ty, t == ty
                c.tp += int((pt & tt).sum())
                c.fp += int((pt & ~tt).sum())
                c.fn += int((~pt & tt).sum())
                c.tn += int((~pt & ~tt).sum())
    return rep


# ---------------------------------------------------------------------------
# emitters


def _cell(v):
    if v is None:
        return UNDEFINED
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r[c]) for c in header])
    return buf.getvalue()


def scans_csv(scans) -> str:
    return _csv(SCAN_COLUMNS, [s.row() for s in scans])


def summary_csv(rows) -> str:
    return _csv(SUMMARY_COLUMNS + ("n_scans",), [asdict(r) for r in rows])


def bifurcation_csv(report: BifurcationReport) -> str:
    return _csv(BIFURCATION_COLUMNS, report.rows())


def summary_table(rows) -> str:
    return "\n".join(["\t".join(SUMMARY_HEADERS)] + [format_summary_row(r) for r in rows]) + "\n"
