"""Anatomical taxonomies, the node-type lookup table and sub-tree definitions.

The Circle-of-Willis schema ships as ``data/default_schema.json``; any file
following the same layout (see ``docs/formats.md``) can be loaded instead.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable

from .errors import SchemaParseError, SchemaValidationError

N_NODE_TYPES = 21
N_EDGE_TYPES = 23
NON_TYPE = 0
ONE_OR_MORE = "+"
SUBTREE_NAMES = ("left_anterior", "right_anterior", "posterior")
SCHEMA_ENV_VAR = "ARTLABEL_SCHEMA"


@dataclass(frozen=True)
class PatternItem:
    edge_type: int
    count: int | str  # exact multiplicity, or ONE_OR_MORE

    @property
    def wildcard(self) -> bool:
        return self.count == ONE_OR_MORE

    def accepts(self, n: int) -> bool:
        return n >= 1 if self.wildcard else n == self.count


@dataclass(frozen=True)
class LookupEntry:
    node_type: int
    pattern: tuple[PatternItem, ...]

    @property
    def wildcard(self) -> bool:
        return any(p.wildcard for p in self.pattern)

    def matches(self, counts: Counter) -> bool:
        if set(counts) != {p.edge_type for p in self.pattern}:
            return False
        return all(p.accepts(counts[p.edge_type]) for p in self.pattern)

    def overlaps(self, other: LookupEntry) -> bool:
        """True if some concrete multiset satisfies both patterns."""
        mine = {p.edge_type: p for p in self.pattern}
        theirs = {p.edge_type: p for p in other.pattern}
        if set(mine) != set(theirs):
            return False
        for t, a in mine.items():
            b = theirs[t]
            if not a.wildcard and not b.wildcard and a.count != b.count:
                return False
        return True


class LookupTable:
    """Maps multisets of incident edge types to a node type.

    Exact-multiplicity entries are tried before wildcard ones; among
    wildcard entries longer patterns win.
    """

    def __init__(self, entries: Iterable[LookupEntry]):
        entries = list(entries)
        exact = [e for e in entries if not e.wildcard]
        wild = sorted((e for e in entries if e.wildcard), key=lambda e: -len(e.pattern))
        self.entries: tuple[LookupEntry, ...] = tuple(exact + wild)

    def lookup(self, incident_edge_types) -> int | None:
        counts = Counter(int(t) for t in incident_edge_types)
        if not counts:
            return None
        for entry in self.entries:
            if entry.matches(counts):
                return entry.node_type
        return None

    def __len__(self):
        return len(self.entries)


def lookup_node_type(table: LookupTable, incident_edge_types) -> int | None:
    """Node type whose pattern matches the incident edge multiset, or None."""
    return table.lookup(incident_edge_types)


@dataclass(frozen=True)
class SubTreeDef:
    name: str
    major_node: int
    branch_nodes: tuple[int, ...]
    expected_connecting_edge: dict
    member_nodes: tuple[int, ...]
    distance_guarded: tuple[int, ...] = ()


@dataclass
class AnatomySchema:
    schema_version: str
    node_names: list[str]
    edge_names: list[str]
    lookup: LookupTable
    subtrees: list[SubTreeDef]
    segment_between: dict
    cow_node_types: frozenset
    canonical_incident: dict = field(default_factory=dict)
    bifurcation_groups: dict = field(default_factory=dict)
    level3: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self._node_ids = {n: i for i, n in enumerate(self.node_names)}
        self._edge_ids = {n: i for i, n in enumerate(self.edge_names)}

    @property
    def n_node_types(self) -> int:
        return len(self.node_names)

    @property
    def n_edge_types(self) -> int:
        return len(self.edge_names)

    def node_id(self, name: str) -> int:
        try:
            return self._node_ids[name]
        except KeyError:
            raise KeyError(f"unknown node type {name!r}") from None

    def edge_id(self, name: str) -> int:
        try:
            return self._edge_ids[name]
        except KeyError:
            raise KeyError(f"unknown edge type {name!r}") from None

    def segment_for(self, a: int, b: int) -> int | None:
        return self.segment_between.get(frozenset((int(a), int(b))))

    def subtree(self, name: str) -> SubTreeDef:
        for st in self.subtrees:
            if st.name == name:
                return st
        raise KeyError(name)


def segment_for(schema: AnatomySchema, a: int, b: int) -> int | None:
    """Segment type spanning the two bifurcation types, symmetric in (a, b)."""
    return schema.segment_for(a, b)


# ---------------------------------------------------------------------------
# loading


def default_schema_path() -> str:
    env = os.environ.get(SCHEMA_ENV_VAR)
    if env:
        return env
    return str(resources.files("artlabel").joinpath("data/default_schema.json"))


_DEFAULT = None


def default_schema() -> AnatomySchema:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_schema(str(resources.files("artlabel").joinpath("data/default_schema.json")))
    return _DEFAULT


def load_schema(path) -> AnatomySchema:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return parse_schema(text)


def parse_schema(text: str) -> AnatomySchema:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaParseError(exc.msg, line=exc.lineno) from exc
    if not isinstance(raw, dict):
        raise SchemaParseError("top level must be an object", line=1)
    return _build_schema(raw)


def _require(raw, key, where="schema"):
    if key not in raw:
        raise SchemaParseError(f"{where}: missing field {key!r}")
    return raw[key]


def _taxonomy(raw_list, label, expected):
    if not isinstance(raw_list, list):
        raise SchemaParseError(f"{label} must be a list")
    ids, names = [], []
    for item in raw_list:
        ids.append(_require(item, "id", label))
        names.append(_require(item, "name", label))
    if len(set(ids)) != len(ids):
        raise SchemaValidationError(f"{label} ids unique", "duplicate id")
    if len(set(names)) != len(names):
        raise SchemaValidationError(f"{label} names unique", "duplicate name")
    if sorted(ids) != list(range(len(ids))):
        raise SchemaValidationError(f"{label} ids dense", f"got {sorted(ids)}")
    if len(ids) != expected:
        raise SchemaValidationError(f"exactly {expected} {label}", f"got {len(ids)}")
    ordered = [None] * len(ids)
    for i, n in zip(ids, names):
        ordered[i] = n
    if ordered[0] != "Non_Type":
        raise SchemaValidationError(f"{label} id 0 is Non_Type", f"got {ordered[0]!r}")
    return ordered


def _build_schema(raw: dict) -> AnatomySchema:
    version = str(_require(raw, "schema_version"))
    node_names = _taxonomy(_require(raw, "node_types"), "node_types", N_NODE_TYPES)
    edge_names = _taxonomy(_require(raw, "edge_types"), "edge_types", N_EDGE_TYPES)
    nid = {n: i for i, n in enumerate(node_names)}
    eid = {n: i for i, n in enumerate(edge_names)}

    def node(name, where):
        if name not in nid:
            raise SchemaValidationError("references resolve", f"{where}: unknown node type {name!r}")
        return nid[name]

    def edge(name, where):
        if name not in eid:
            raise SchemaValidationError("references resolve", f"{where}: unknown edge type {name!r}")
        return eid[name]

    entries = []
    for i, item in enumerate(_require(raw, "lookup")):
        where = f"lookup[{i}]"
        nt = node(_require(item, "node_type", where), where)
        if nt == NON_TYPE:
            raise SchemaValidationError("lookup values exclude Non_Type", where)
        pattern = []
        for p in _require(item, "pattern", where):
            count = _require(p, "count", where)
            if count != ONE_OR_MORE and not (isinstance(count, int) and count >= 1):
                raise SchemaParseError(f"{where}: count must be a positive integer or '+'")
            pattern.append(PatternItem(edge(_require(p, "edge_type", where), where), count))
        if not pattern or len({p.edge_type for p in pattern}) != len(pattern):
            raise SchemaValidationError("lookup patterns well-formed", f"{where}: empty or repeated edge type")
        entries.append(LookupEntry(nt, tuple(pattern)))
    for a in range(len(entries)):
        for b in range(a + 1, len(entries)):
            if entries[a].overlaps(entries[b]):
                raise SchemaValidationError(
                    "lookup determinism",
                    f"lookup[{a}] and lookup[{b}] can match the same multiset")
    covered = {e.node_type for e in entries}
    missing = [node_names[i] for i in range(1, len(node_names)) if i not in covered]
    if missing:
        raise SchemaValidationError("every node type has a lookup entry", ", ".join(missing))

    subtrees = []
    for i, st in enumerate(_require(raw, "subtrees")):
        where = f"subtrees[{i}]"
        major = node(_require(st, "major_node", where), where)
        branches = tuple(node(n, where) for n in _require(st, "branch_nodes", where))
        if major in branches:
            raise SchemaValidationError("major_node not in branch_nodes", where)
        expected = {node(k, where): edge(v, where)
                    for k, v in _require(st, "expected_connecting_edge", where).items()}
        if set(expected) != set(branches):
            raise SchemaValidationError("expected_connecting_edge covers branch_nodes", where)
        members = tuple(node(n, where) for n in st.get("member_nodes", []))
        members = members or (major,) + branches
        guarded = tuple(node(n, where) for n in st.get("distance_guarded", []))
        if not set(guarded) <= set(branches):
            raise SchemaValidationError("distance_guarded subset of branch_nodes", where)
        subtrees.append(SubTreeDef(_require(st, "name", where), major, branches, expected, members, guarded))
    if sorted(s.name for s in subtrees) != sorted(SUBTREE_NAMES):
        raise SchemaValidationError("exactly 3 sub-trees", f"got {[s.name for s in subtrees]}")
    order = {n: i for i, n in enumerate(SUBTREE_NAMES)}
    subtrees.sort(key=lambda s: order[s.name])

    segments = {}
    for i, seg in enumerate(_require(raw, "segment_between")):
        where = f"segment_between[{i}]"
        a = node(_require(seg, "a", where), where)
        b = node(_require(seg, "b", where), where)
        e = edge(_require(seg, "edge", where), where)
        if NON_TYPE in (a, b) or a == b:
            raise SchemaValidationError("segment_between pairs distinct non-Non_Type", where)
        key = frozenset((a, b))
        if segments.get(key, e) != e:
            raise SchemaValidationError("segment_between symmetric", f"{where} conflicts with an earlier entry")
        segments[key] = e

    cow = frozenset(node(n, "cow_node_types") for n in _require(raw, "cow_node_types"))
    if NON_TYPE in cow:
        raise SchemaValidationError("cow_node_types excludes Non_Type")

    canonical = {}
    for item in raw["node_types"]:
        if "canonical_incident" in item:
            canonical[nid[item["name"]]] = tuple(edge(n, item["name"]) for n in item["canonical_incident"])

    groups = {g: tuple(node(n, "bifurcation_groups") for n in members)
              for g, members in raw.get("bifurcation_groups", {}).items()}

    level3 = _resolve_level3(raw.get("level3", {}), node, edge)

    return AnatomySchema(
        schema_version=version,
        node_names=node_names,
        edge_names=edge_names,
        lookup=LookupTable(entries),
        subtrees=subtrees,
        segment_between=segments,
        cow_node_types=cow,
        canonical_incident=canonical,
        bifurcation_groups=groups,
        level3=level3,
        name=raw.get("name", ""),
    )


_L3_NODE_KEYS = {"root", "major", "oa_node", "oa_end", "pcomm_node", "pcomm_from", "a", "b", "parent", "node"}
_L3_EDGE_KEYS = {"oa_edge", "pcomm_edge", "edge"}


def _resolve_level3(raw, node, edge):
    out = {}
    for section, items in raw.items():
        resolved = []
        for i, item in enumerate(items):
            where = f"level3.{section}[{i}]"
            r = {}
            for k, v in item.items():
                if k in _L3_NODE_KEYS:
                    r[k] = node(v, where)
                elif k in _L3_EDGE_KEYS:
                    r[k] = edge(v, where)
                elif k == "nodes":
                    r[k] = tuple(node(n, where) for n in v)
                else:
                    raise SchemaParseError(f"{where}: unknown key {k!r}")
            resolved.append(r)
        out[section] = resolved
    return out
