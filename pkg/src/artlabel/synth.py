"""Synthetic Circle-of-Willis centerline generator.

Cases are built from a hand-authored head-scale template (millimeters,
x toward the subject's left, y anterior, z superior) with random segment
drops, random distal trees on M2/A2/P2 and optional small noise branches on
M1. Ground truth is known by construction.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .anatomy import AnatomySchema, default_schema
from .io import dump_json, write_centerlines
from .vessel_graph import CenterlineSet, build_graph

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "artlabel-dataset"

# left-side template; the right side mirrors x
_TEMPLATE_L = {
    "ICA_Root": (18.0, 2.0, -40.0),
    "ICA_OA": (17.0, 6.0, -18.0),
    "OA_End": (22.0, 32.0, -12.0),
    "ICA_PComm": (15.0, 3.0, -7.0),
    "ICA_MCA_ACA": (14.0, 4.0, 0.0),
    "M1_2": (34.0, 6.0, 5.0),
    "A1_2": (2.0, 18.0, 3.0),
    "P1_2": (9.0, -9.0, -4.0),
    "VA_Root": (9.0, -24.0, -58.0),
}
_TEMPLATE_MID = {
    "PCA_BA": (0.0, -10.0, -4.0),
    "BA_VA": (0.0, -14.0, -32.0),
}
# distal growth directions (left side)
_M2_DIRECTIONS = ((1.0, 0.5, 0.6), (1.0, -0.6, 0.3), (0.9, 0.1, -0.5))
_A2_DIRECTION = (0.0, 0.5, 1.0)
_P2_DIRECTION = (0.5, -1.0, 0.3)

DROPPABLE = ("AComm", "PComm_L", "PComm_R", "A1_L", "A1_R", "P1_L", "P1_R")
INFLOW_ROOTS = ("ICA_Root_L", "ICA_Root_R", "VA_Root_L", "VA_Root_R")


@dataclass
class SynthConfig:
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"train": 200, "test": 50})
    p_drop_acomm: float = 0.2
    p_drop_pcomm: float = 0.3
    p_drop_a1: float = 0.05
    p_drop_p1: float = 0.1
    noise_rate: float = 3.0
    jitter_mm: float = 1.5
    scale_jitter: float = 0.08
    bend_mm: float = 1.0
    point_spacing_mm: float = 1.0
    distal_depth: tuple = (0, 1)
    distal_split_prob: float = 0.5
    m2_branches: tuple = (2, 3)
    radius_ica_ba: tuple = (1.5, 2.5)
    radius_va: tuple = (1.2, 2.0)
    radius_proximal: tuple = (1.0, 2.0)
    radius_comm: tuple = (0.4, 1.2)
    radius_oa: tuple = (0.5, 1.0)
    radius_distal: tuple = (0.6, 1.2)
    radius_noise: tuple = (0.2, 0.5)
    noise_length_mm: tuple = (3.0, 8.0)
    m2_length_mm: tuple = (15.0, 22.0)
    a2_length_mm: tuple = (22.0, 30.0)
    p2_length_mm: tuple = (20.0, 28.0)
    resolutions: tuple = ((0.3, 0.3, 0.6), (0.4, 0.4, 0.4), (0.5, 0.5, 0.8))
    max_retries: int = 50

    def __post_init__(self):
        self.distal_depth = tuple(self.distal_depth)
        self.m2_branches = tuple(self.m2_branches)
        self.resolutions = tuple(tuple(r) for r in self.resolutions)
        for name in ("radius_ica_ba", "radius_va", "radius_proximal", "radius_comm", "radius_oa",
                     "radius_distal", "radius_noise", "noise_length_mm",
                     "m2_length_mm", "a2_length_mm", "p2_length_mm"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def drop_probabilities(self) -> dict:
        return {
            "AComm": self.p_drop_acomm,
            "PComm_L": self.p_drop_pcomm, "PComm_R": self.p_drop_pcomm,
            "A1_L": self.p_drop_a1, "A1_R": self.p_drop_a1,
            "P1_L": self.p_drop_p1, "P1_R": self.p_drop_p1,
        }

    def validate(self):
        for name in ("p_drop_acomm", "p_drop_pcomm", "p_drop_a1", "p_drop_p1", "distal_split_prob"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be a probability in [0, 1], got {v!r}")
        for name in ("jitter_mm", "scale_jitter", "bend_mm", "noise_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.point_spacing_mm <= 0:
            raise ValueError("point_spacing_mm must be > 0")
        if any(int(c) < 0 for c in self.counts.values()):
            raise ValueError("counts must be >= 0")
        if not self.resolutions or any(min(r) <= 0 for r in self.resolutions):
            raise ValueError("resolutions must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["distal_depth"] = list(self.distal_depth)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class SynthCase:
    centerlines: CenterlineSet
    variation: dict
    split: str = "train"

    @property
    def case_id(self) -> str:
        return self.centerlines.case_id


# ---------------------------------------------------------------------------
# construction


class _Builder:
    """Accumulates template nodes (mm) and labeled vessel segments."""

    def __init__(self, schema: AnatomySchema, cfg: SynthConfig, rng: np.random.Generator):
        self.schema = schema
        self.cfg = cfg
        self.rng = rng
        self.nodes = {}    # name -> (position, node type id)
        self.vessels = []  # (label, node a, node b, radius a, radius b)

    def node(self, name, pos, label="Non_Type"):
        self.nodes[name] = (np.asarray(pos, dtype=np.float64), self.schema.node_id(label))

    def vessel(self, label, a, b, radius):
        ra, rb = radius
        self.vessels.append((self.schema.edge_id(label), a, b, ra, rb))

    def radius(self, rng_range, taper=0.85):
        r = float(self.rng.uniform(*rng_range))
        return r, r * taper


def _mirror(p):
    return (-p[0], p[1], p[2])


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _perturb_direction(rng, d, spread_deg):
    d = _unit(d)
    noise = rng.normal(0.0, math.radians(spread_deg), 3)
    return _unit(d + noise - d * (noise @ d))


def _grow_tree(b: _Builder, root: str, label: str, directions, length_range, side_sign, prefix):
    cfg, rng = b.cfg, b.rng
    depth = int(rng.integers(cfg.distal_depth[0], cfg.distal_depth[1] + 1))
    frontier = []
    for j, d in enumerate(directions):
        d = np.array(d, dtype=np.float64)
        d[0] *= side_sign
        d = _perturb_direction(rng, d, 12.0 if cfg.jitter_mm > 0 else 0.0)
        length = float(rng.uniform(*length_range))
        name = f"{prefix}{j}"
        b.node(name, b.nodes[root][0] + d * length)
        b.vessel(label, root, name, b.radius(cfg.radius_distal))
        frontier.append((name, d, length))
    for _ in range(depth):
        nxt = []
        for name, d, length in frontier:
            if rng.uniform() >= cfg.distal_split_prob:
                continue
            perp = _unit(np.cross(d, (0.0, 0.0, 1.0)) if abs(d[2]) < 0.9 else np.cross(d, (1.0, 0.0, 0.0)))
            for c, sgn in enumerate((1.0, -1.0)):
                cd = _unit(d + sgn * 0.7 * perp)
                cl = 0.5 * length * float(rng.uniform(0.8, 1.2))
                child = f"{name}_{c}"
                b.node(child, b.nodes[name][0] + cd * cl)
                b.vessel(label, name, child, b.radius((0.5 * cfg.radius_distal[0], cfg.radius_distal[0])))
                nxt.append((child, cd, cl))
        frontier = nxt


def _build_template(b: _Builder, dropped: set):
    cfg, rng = b.cfg, b.rng
    scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter, 3) if cfg.scale_jitter > 0 else np.ones(3)

    def place(p):
        p = np.asarray(p) * scale
        if cfg.jitter_mm > 0:
            p = p + rng.normal(0.0, cfg.jitter_mm, 3)
        return p

    for name, p in _TEMPLATE_MID.items():
        b.node(name, place(p), name)
    for side in "LR":
        for name, p in _TEMPLATE_L.items():
            q = p if side == "L" else _mirror(p)
            b.node(f"{name}_{side}", place(q), f"{name}_{side}")

    r_ba = b.radius(cfg.radius_ica_ba)
    b.vessel("BA", "BA_VA", "PCA_BA", r_ba)
    for side in "LR":
        s = side
        r_ica = b.radius(cfg.radius_ica_ba, taper=0.9)
        # the ICA is traced piecewise; a missing PComm leaves no junction on it
        ica_stops = [f"ICA_Root_{s}", f"ICA_OA_{s}"]
        if f"PComm_{s}" not in dropped:
            ica_stops.append(f"ICA_PComm_{s}")
        ica_stops.append(f"ICA_MCA_ACA_{s}")
        for a, c in zip(ica_stops[:-1], ica_stops[1:]):
            b.vessel(f"ICA_{s}", a, c, r_ica)
        b.vessel(f"OA_{s}", f"ICA_OA_{s}", f"OA_End_{s}", b.radius(cfg.radius_oa))
        b.vessel(f"M1_{s}", f"ICA_MCA_ACA_{s}", f"M1_2_{s}", b.radius(cfg.radius_proximal))
        if f"A1_{s}" not in dropped:
            b.vessel(f"A1_{s}", f"ICA_MCA_ACA_{s}", f"A1_2_{s}", b.radius(cfg.radius_proximal))
        if f"P1_{s}" not in dropped:
            b.vessel(f"P1_{s}", "PCA_BA", f"P1_2_{s}", b.radius(cfg.radius_proximal))
        if f"PComm_{s}" not in dropped:
            b.vessel(f"PComm_{s}", f"ICA_PComm_{s}", f"P1_2_{s}", b.radius(cfg.radius_comm))
        b.vessel(f"VA_{s}", f"VA_Root_{s}", "BA_VA", b.radius(cfg.radius_va, taper=1.0))
    if "AComm" not in dropped:
        b.vessel("AComm", "A1_2_L", "A1_2_R", b.radius(cfg.radius_comm, taper=1.0))

    for side, sign in (("L", 1.0), ("R", -1.0)):
        k = int(rng.integers(cfg.m2_branches[0], cfg.m2_branches[1] + 1))
        _grow_tree(b, f"M1_2_{side}", f"M2_{side}", _M2_DIRECTIONS[:k], cfg.m2_length_mm, sign, f"m2{side}")
        _grow_tree(b, f"A1_2_{side}", f"A2_{side}", (_A2_DIRECTION,), cfg.a2_length_mm, sign, f"a2{side}")
        _grow_tree(b, f"P1_2_{side}", f"P2_{side}", (_P2_DIRECTION,), cfg.p2_length_mm, sign, f"p2{side}")


def _sample_polyline(rng, pa, pb, ra, rb, spacing, bend_mm):
    length = float(np.linalg.norm(pb - pa))
    n = max(2, int(math.ceil(length / spacing)) + 1)
    t = np.linspace(0.0, 1.0, n)
    pts = pa[None, :] + t[:, None] * (pb - pa)[None, :]
    if bend_mm > 0 and n > 2:
        axis = _unit(pb - pa)
        u = rng.normal(size=3)
        u = _unit(u - axis * (u @ axis))
        amp = float(rng.normal(0.0, bend_mm))
        pts = pts + amp * np.sin(math.pi * t)[:, None] * u[None, :]
    pts[0], pts[-1] = pa, pb
    rad = ra + t * (rb - ra)
    return pts, rad


def _render(b: _Builder, case_id: str, resolution, schema_version) -> CenterlineSet:
    res = np.asarray(resolution, dtype=np.float64)
    polylines, edge_labels, node_labels = [], [], []
    for label, a, c, ra, rc in b.vessels:
        pa, la = b.nodes[a]
        pc, lc = b.nodes[c]
        pts, rad = _sample_polyline(b.rng, pa, pc, ra, rc, b.cfg.point_spacing_mm, b.cfg.bend_mm)
        polylines.append(np.column_stack([pts / res, rad]))
        edge_labels.append(label)
        nl = {}
        if la:
            nl[0] = la
        if lc:
            nl[len(pts) - 1] = lc
        node_labels.append(nl)
    return CenterlineSet(polylines=polylines, resolution=res, edge_labels=edge_labels,
                         node_labels=node_labels, case_id=case_id, schema_version=schema_version)


def check_case(cl: CenterlineSet, schema: AnatomySchema) -> list[str]:
    """Problems with a labeled case: a component with no inflow root, or nodes
    inconsistent with the lookup table."""
    g = build_graph(cl)
    problems = []
    roots = {schema.node_id(n) for n in INFLOW_ROOTS}
    n_comp, comp = connected_components(
        coo_matrix((np.ones(g.n_edges), (g.edges[:, 0], g.edges[:, 1])), shape=(g.n_nodes, g.n_nodes)),
        directed=False)
    fed = {int(comp[i]) for i in range(g.n_nodes) if int(g.node_gt[i]) in roots}
    if len(fed) < n_comp:
        problems.append(f"{n_comp - len(fed)} component(s) without an inflow root")
    for i, k_list in enumerate(g.incident()):
        if not g.node_gt[i]:
            continue
        local = [int(g.edge_gt_ends[k, 0] if g.edges[k, 0] == i else g.edge_gt_ends[k, 1]) for k, _ in k_list]
        found = schema.lookup.lookup(local)
        if found != g.node_gt[i]:
            problems.append(f"node {i} labeled {schema.node_names[g.node_gt[i]]} but incident "
                            f"{[schema.edge_names[t] for t in local]} gives {found}")
    return problems


_VALID_DROPS = {}


def valid_drop_sets(cfg: SynthConfig, schema: AnatomySchema) -> list[frozenset]:
    """Drop sets whose canonical (noise-free) anatomy passes ``check_case``; cached per schema."""
    key = (schema.schema_version, tuple(schema.node_names), cfg.m2_branches[0])
    if key not in _VALID_DROPS:
        canon = dataclasses.replace(cfg, jitter_mm=0.0, scale_jitter=0.0, bend_mm=0.0, distal_depth=(0, 0),
                                    m2_branches=(cfg.m2_branches[0],) * 2, noise_rate=0.0)
        out = []
        for bits in itertools.product((False, True), repeat=len(DROPPABLE)):
            d = frozenset(n for n, b in zip(DROPPABLE, bits) if b)
            b = _Builder(schema, canon, np.random.default_rng(0))
            _build_template(b, d)
            if not check_case(_render(b, "canonical", (1.0, 1.0, 1.0), schema.schema_version), schema):
                out.append(d)
        _VALID_DROPS[key] = out
    return _VALID_DROPS[key]


def drop_distribution(cfg: SynthConfig, schema: AnatomySchema, iters: int = 500):
    """Independent per-segment drops conditioned on validity, with the per-segment
    odds fitted so that the conditional drop rates equal the configured ones."""
    sets = valid_drop_sets(cfg, schema)
    target = np.array([cfg.drop_probabilities()[n] for n in DROPPABLE])
    member = np.array([[n in d for n in DROPPABLE] for d in sets], dtype=np.float64)
    allowed = np.ones(len(sets), dtype=bool)
    allowed &= ~(member[:, target == 0.0] > 0).any(axis=1)
    allowed &= (member[:, target == 1.0] > 0).all(axis=1)
    if not allowed.any():
        raise ValueError("drop probabilities of 0 and 1 leave no valid anatomy")
    sets = [d for d, a in zip(sets, allowed) if a]
    member = member[allowed]
    free = (target > 0.0) & (target < 1.0)
    theta = np.zeros(len(DROPPABLE))
    theta[free] = np.log(target[free] / (1 - target[free]))
    probs = np.full(len(sets), 1.0 / len(sets))
    for _ in range(iters if free.any() else 0):
        logit = member[:, free] @ theta[free]
        probs = np.exp(logit - logit.max())
        probs /= probs.sum()
        rate = np.clip(probs @ member[:, free], 1e-12, 1 - 1e-12)
        step = np.log(target[free] / (1 - target[free])) - np.log(rate / (1 - rate))
        theta[free] += np.clip(step, -2.0, 2.0)
        if np.abs(rate - target[free]).max() < 1e-9:
            break
    achieved = probs @ member
    off = [f"{n}: {a:.3f} (configured {t:.3f})" for n, a, t in zip(DROPPABLE, achieved, target)
           if abs(a - t) > 1e-3]
    if off:
        logger.warning("drop rates not attainable with valid anatomy; achieved %s", ", ".join(off))
    return sets, probs


def _sample_drops(rng, dist) -> set:
    sets, probs = dist
    i = min(int(np.searchsorted(np.cumsum(probs), rng.uniform(), side="right")), len(sets) - 1)
    return set(sets[i])


def generate_case(cfg: SynthConfig, rng: np.random.Generator, case_id: str,
                  schema: AnatomySchema | None = None, split: str = "train") -> SynthCase:
    schema = schema or default_schema()
    notes = []
    dist = drop_distribution(cfg, schema)
    for attempt in range(cfg.max_retries + 1):
        dropped = _sample_drops(rng, dist)
        b = _Builder(schema, cfg, rng)
        _build_template(b, dropped)
        res = cfg.resolutions[int(rng.integers(len(cfg.resolutions)))]
        cl = _render(b, case_id, res, schema.schema_version)
        problems = check_case(cl, schema)
        if not problems:
            break
        notes.append(f"regenerated: dropping {sorted(dropped)} gives {problems[0]}")
    else:
        raise RuntimeError(f"{case_id}: no valid anatomy after {cfg.max_retries} retries")
    case = SynthCase(cl, {"dropped": sorted(dropped), "noise_branches": 0, "retries": attempt, "notes": notes},
                     split=split)
    n_noise = int(min(rng.poisson(cfg.noise_rate), 8)) if cfg.noise_rate > 0 else 0
    if n_noise:
        case = inject_noise_branches(case, n_noise, rng, cfg)
    return case


def generate(cfg: SynthConfig, schema: AnatomySchema | None = None) -> list[SynthCase]:
    """All cases of every split, in split order, each with its own sub-seed."""
    schema = schema or default_schema()
    total = sum(int(c) for c in cfg.counts.values())
    seeds = np.random.SeedSequence(cfg.seed).spawn(total)
    cases = []
    i = 0
    for split, count in cfg.counts.items():
        for _ in range(int(count)):
            rng = np.random.default_rng(seeds[i])
            cases.append(generate_case(cfg, rng, f"case_{i:04d}", schema, split))
            i += 1
    return cases


def inject_noise_branches(case: SynthCase, n: int, rng: np.random.Generator,
                          cfg: SynthConfig | None = None, schema: AnatomySchema | None = None) -> SynthCase:
    """Attach ``n`` short thin Non_Type branches to interior points of M1 segments."""
    if n <= 0:
        return case
    cfg = cfg or SynthConfig()
    schema = schema or default_schema()
    cl = case.centerlines
    m1 = {schema.edge_id("M1_L"), schema.edge_id("M1_R")}
    slots = [(pi, j) for pi, lab in enumerate(cl.edge_labels) if lab in m1
             for j in range(1, len(cl.polylines[pi]) - 1)]
    if not slots:
        logger.warning("%s: no M1 segment; noise injection skipped", cl.case_id)
        return case
    # an interior point already used as a junction would change the M1 topology twice
    used = _junction_keys(cl)
    free = [s for s in slots if tuple(cl.polylines[s[0]][s[1], :3]) not in used]
    n = min(n, len(free))
    picks = rng.choice(len(free), size=n, replace=False)
    res = cl.resolution
    polylines = list(cl.polylines)
    edge_labels = list(cl.edge_labels)
    node_labels = list(cl.node_labels)
    for p in sorted(int(x) for x in picks):
        pi, j = free[p]
        anchor_vox = polylines[pi][j, :3]
        anchor = anchor_vox * res
        axis = _unit((polylines[pi][j + 1, :3] - polylines[pi][j - 1, :3]) * res)
        up = rng.normal(size=3) + np.array([0.0, 0.0, 1.5])
        d = _unit(up - axis * (up @ axis))
        length = float(rng.uniform(*cfg.noise_length_mm))
        r0 = float(rng.uniform(*cfg.radius_noise))
        pts, rad = _sample_polyline(rng, anchor, anchor + d * length, r0, 0.8 * r0,
                                    cfg.point_spacing_mm, 0.0)
        vox = pts / res
        vox[0] = anchor_vox
        polylines.append(np.column_stack([vox, rad]))
        edge_labels.append(0)
        node_labels.append({})
    new_cl = dataclasses.replace(cl, polylines=polylines, edge_labels=edge_labels, node_labels=node_labels)
    variation = dict(case.variation)
    variation["noise_branches"] = variation.get("noise_branches", 0) + n
    return SynthCase(new_cl, variation, case.split)


def _junction_keys(cl: CenterlineSet) -> set:
    ends = set()
    for poly in cl.polylines:
        ends.add(tuple(poly[0, :3]))
        ends.add(tuple(poly[-1, :3]))
    return ends


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(cases: list[SynthCase], outdir, cfg: SynthConfig, schema: AnatomySchema | None = None) -> dict:
    schema = schema or default_schema()
    os.makedirs(os.path.join(outdir, "cases"), exist_ok=True)
    entries = []
    for case in cases:
        rel = f"cases/{case.case_id}.jsonl"
        write_centerlines(case.centerlines, os.path.join(outdir, rel), schema)
        entries.append({"case_id": case.case_id, "split": case.split, "file": rel, "variation": case.variation})
    manifest = {
        "format": MANIFEST_FORMAT,
        "format_version": 1,
        "seed": cfg.seed,
        "schema_version": schema.schema_version,
        "config": cfg.to_dict(),
        "cases": entries,
    }
    dump_json(manifest, os.path.join(outdir, "manifest.json"), indent=1)
    return manifest
