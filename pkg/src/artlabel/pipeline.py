"""End-to-end labeling of one case: graph construction, network forward pass, refinement."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .anatomy import AnatomySchema
from .gnn import ModelParams, predict
from .refine import HRConfig, LabelingResult, gnn_only_result, hierarchical_refine
from .training import DistanceStats
from .vessel_graph import ArteryGraph, CenterlineSet, build_graph

logger = logging.getLogger(__name__)

THRES_GRID = (1e-10, 1e-8, 1e-6, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class Labeled:
    graph: ArteryGraph
    result: LabelingResult
    seconds: float


def label_graph(params: ModelParams, g: ArteryGraph, schema: AnatomySchema,
                stats: DistanceStats | None, cfg: HRConfig | None = None, use_hr: bool = True) -> LabelingResult:
    scores = predict(params, g)
    if not use_hr:
        return gnn_only_result(scores, g)
    return hierarchical_refine(scores, g, schema, stats, cfg)


def label_case(params: ModelParams, cl: CenterlineSet, schema: AnatomySchema, stats: DistanceStats | None,
               cfg: HRConfig | None = None, use_hr: bool = True) -> Labeled:
    """Label one centerline set; ``seconds`` covers construction, forward pass and refinement."""
    t0 = time.perf_counter()
    g = build_graph(cl)
    result = label_graph(params, g, schema, stats, cfg, use_hr)
    return Labeled(g, result, time.perf_counter() - t0)


def select_thres(params: ModelParams, graphs, schema: AnatomySchema, stats: DistanceStats | None,
                 grid=THRES_GRID, base: HRConfig | None = None) -> tuple[float, dict]:
    """Refinement threshold with the best mean node accuracy on ``graphs``.

    Ties go to the smallest value. Returns the choice and the accuracy per grid value.
    """
    base = base or HRConfig()
    graphs = [g for g in graphs if g.labeled]
    if not graphs:
        return base.thres, {}
    scored = [(g, predict(params, g)) for g in graphs]
    acc = {}
    for th in sorted(grid):
        cfg = replace(base, thres=th)
        acc[th] = float(np.mean([np.mean(hierarchical_refine(s, g, schema, stats, cfg).node_labels == g.node_gt)
                                 for g, s in scored]))
    best = max(sorted(acc), key=lambda t: (acc[t], -t))
    logger.info("refinement threshold %g (validation node accuracy %.4f)", best, acc[best])
    return best, acc
