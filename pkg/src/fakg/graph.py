"""Face attack knowledge graph: loading, integrity checks and structural queries.

The graph is bipartite. Attack-type entities point at feature entities through
relation triples ``(attack, predicate, feature)``; each relation carries the
regular-expression patterns used to spot it in free text.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Mapping

from .labels import label_key

__all__ = [
    "EntityKind",
    "FeatureScope",
    "Entity",
    "Relation",
    "FaceAttackGraph",
    "Subgraph",
    "SupportSets",
    "Diagnostic",
    "GraphError",
    "GraphParseError",
    "GraphIntegrityError",
    "UnknownEntityError",
    "UnknownLabelError",
    "load_graph",
    "read_graph",
    "reference_graph",
    "dump_graph",
    "graph_to_dict",
    "validate_graph",
    "shortest_distance",
    "ego_subgraph",
    "support_sets",
    "attack_node_for_label",
    "check_pattern",
    "fallback_pattern",
]

FORMAT_VERSION = 1


class EntityKind(str, Enum):
    ATTACK_TYPE = "attack_type"
    FEATURE = "feature"


class FeatureScope(str, Enum):
    COMMON = "common"
    SPECIFIC = "specific"
    NOT_APPLICABLE = "not_applicable"


class GraphError(ValueError):
    """Base class for graph loading failures."""


class GraphParseError(GraphError):
    pass


class GraphIntegrityError(GraphError):
    pass


class UnknownEntityError(KeyError):
    def __str__(self) -> str:
        return f"unknown entity id: {self.args[0]!r}"


class UnknownLabelError(KeyError):
    def __str__(self) -> str:
        return f"unknown label: {self.args[0]!r}"


@dataclass(frozen=True)
class Entity:
    id: str
    name: str
    kind: EntityKind
    feature_scope: FeatureScope = FeatureScope.NOT_APPLICABLE
    aliases: tuple[str, ...] = ()

    @property
    def is_attack(self) -> bool:
        return self.kind is EntityKind.ATTACK_TYPE

    @property
    def surface_forms(self) -> tuple[str, ...]:
        """Name followed by aliases, duplicates removed."""
        seen: dict[str, None] = {}
        for s in (self.name, *self.aliases):
            seen.setdefault(s, None)
        return tuple(seen)


@dataclass(frozen=True)
class Relation:
    attack: str
    predicate: str
    feature: str
    patterns: tuple[str, ...] = ()

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.attack, self.predicate, self.feature)

    def __str__(self) -> str:
        return f"{self.attack} -[{self.predicate}]-> {self.feature}"


# Constructs outside the supported dialect. Lookaround and backreferences make
# matches non-monotone in the searched text; anchors tie a match to a position.
_FORBIDDEN_ESCAPES = set("123456789AZzGg")


def check_pattern(pattern: str) -> str | None:
    """Return a reason string if ``pattern`` falls outside the pattern dialect.

    Allowed: literals, character classes, alternation, repetition, plain and
    non-capturing groups, and word boundaries. Rejected: lookaround,
    backreferences, anchors, inline flags and other ``(?...)`` extensions.
    """
    if not isinstance(pattern, str) or not pattern:
        return "pattern must be a non-empty string"
    i, n = 0, len(pattern)
    in_class = False
    while i < n:
        c = pattern[i]
        if c == "\\":
            if i + 1 >= n:
                return "trailing backslash"
            nxt = pattern[i + 1]
            if not in_class and nxt in _FORBIDDEN_ESCAPES:
                return f"unsupported escape \\{nxt}"
            i += 2
            continue
        if in_class:
            if c == "]":
                in_class = False
            i += 1
            continue
        if c == "[":
            in_class = True
            # a leading ']' (or '^]') is literal inside the class
            j = i + 1
            if j < n and pattern[j] == "^":
                j += 1
            if j < n and pattern[j] == "]":
                j += 1
            i = j
            continue
        if c in "^$":
            return f"anchor {c!r} not allowed"
        if c == "(" and pattern.startswith("(?", i):
            if not pattern.startswith("(?:", i):
                return "group extension '(?' not allowed except '(?:'"
        i += 1
    try:
        re.compile(pattern, re.IGNORECASE)
    except re.error as exc:
        return f"does not compile: {exc}"
    return None


def fallback_pattern(entity: Entity) -> str:
    """Whole-word alternation over an entity's surface forms."""
    alts = []
    for form in entity.surface_forms:
        words = form.split()
        if words:
            alts.append(r"\s+".join(re.escape(w) for w in words))
    return r"\b(?:" + "|".join(alts) + r")\b"


@dataclass(frozen=True)
class FaceAttackGraph:
    """Immutable, validated knowledge graph.

    Construct through :func:`load_graph` (or :meth:`from_parts`), which enforces
    referential integrity, edge direction and triple uniqueness.
    """

    entities: Mapping[str, Entity]
    relations: tuple[Relation, ...]
    labels: Mapping[str, str]
    conflicts: Mapping[str, tuple[Relation, ...]] | None = None

    _by_key: dict = field(init=False, repr=False, compare=False)
    _adjacency: dict = field(init=False, repr=False, compare=False)
    _outgoing: dict = field(init=False, repr=False, compare=False)
    _compiled: dict = field(init=False, repr=False, compare=False)
    _label_keys: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_key = {r.key: r for r in self.relations}
        adjacency: dict[str, set[str]] = {eid: set() for eid in self.entities}
        outgoing: dict[str, list[Relation]] = {eid: [] for eid in self.entities}
        for r in self.relations:
            adjacency[r.attack].add(r.feature)
            adjacency[r.feature].add(r.attack)
            outgoing[r.attack].append(r)
        compiled = {}
        for r in self.relations:
            pats = r.patterns or (fallback_pattern(self.entities[r.feature]),)
            compiled[r.key] = tuple(re.compile(p, re.IGNORECASE) for p in pats)
        object.__setattr__(self, "_by_key", by_key)
        object.__setattr__(self, "_adjacency", {k: frozenset(v) for k, v in adjacency.items()})
        object.__setattr__(self, "_outgoing", {k: tuple(v) for k, v in outgoing.items()})
        object.__setattr__(self, "_compiled", compiled)
        object.__setattr__(self, "_label_keys", {label_key(k): v for k, v in self.labels.items()})

    @classmethod
    def from_parts(
        cls,
        entities: Iterable[Entity],
        relations: Iterable[Relation],
        labels: Mapping[str, str],
        conflicts: Mapping[str, Iterable[tuple[str, str, str]]] | None = None,
    ) -> "FaceAttackGraph":
        """Build a graph from Python objects, applying the same checks as loading."""
        doc = {
            "version": FORMAT_VERSION,
            "entities": [_entity_to_dict(e) for e in entities],
            "relations": [_relation_to_dict(r) for r in relations],
            "labels": dict(labels),
        }
        if conflicts is not None:
            doc["conflicts"] = {
                a: [{"attack": t[0], "predicate": t[1], "feature": t[2]} for t in triples]
                for a, triples in conflicts.items()
            }
        return _graph_from_document(doc)

    # -- lookups -----------------------------------------------------------

    def entity(self, entity_id: str) -> Entity:
        try:
            return self.entities[entity_id]
        except KeyError:
            raise UnknownEntityError(entity_id) from None

    def relation(self, attack: str, predicate: str, feature: str) -> Relation:
        try:
            return self._by_key[(attack, predicate, feature)]
        except KeyError:
            raise KeyError(f"no relation ({attack}, {predicate}, {feature})") from None

    def has_triple(self, attack: str, predicate: str, feature: str) -> bool:
        return (attack, predicate, feature) in self._by_key

    def neighbors(self, entity_id: str) -> frozenset[str]:
        self.entity(entity_id)
        return self._adjacency[entity_id]

    def relations_from(self, attack: str) -> tuple[Relation, ...]:
        self.entity(attack)
        return self._outgoing[attack]

    def compiled_patterns(self, rel: Relation) -> tuple[re.Pattern, ...]:
        return self._compiled[rel.key]

    @property
    def attack_ids(self) -> list[str]:
        return [e.id for e in self.entities.values() if e.is_attack]

    @property
    def feature_ids(self) -> list[str]:
        return [e.id for e in self.entities.values() if not e.is_attack]


@dataclass(frozen=True)
class Subgraph:
    center: str
    k: int
    nodes: frozenset[str]
    edges: tuple[Relation, ...]

    def content_hash(self) -> str:
        """Stable SHA-256 over center, radius, sorted nodes and edge triples."""
        payload = {
            "center": self.center,
            "k": self.k,
            "nodes": sorted(self.nodes),
            "edges": [list(r.key) for r in self.edges],
        }
        blob = json.dumps(payload, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "center": self.center,
            "k": self.k,
            "nodes": sorted(self.nodes),
            "edges": [
                {"attack": r.attack, "predicate": r.predicate, "feature": r.feature}
                for r in self.edges
            ],
        }


@dataclass(frozen=True)
class SupportSets:
    attack: str
    s_plus: frozenset[Relation]
    s_minus: frozenset[Relation]


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "ids": list(self.ids)}


# -- loading ---------------------------------------------------------------

_TOP_KEYS = ("version", "entities", "relations", "labels", "conflicts")
_ENTITY_KEYS = {"id", "name", "kind", "feature_scope", "aliases"}
_RELATION_KEYS = {"attack", "predicate", "feature", "patterns"}
_TRIPLE_KEYS = {"attack", "predicate", "feature"}


def load_graph(source: bytes | str | IO) -> FaceAttackGraph:
    """Parse and validate a graph document.

    ``source`` may be raw bytes, a decoded string, or a readable file object.

    Raises:
        GraphParseError: the document is not well-formed JSON of the expected shape.
        GraphIntegrityError: dangling endpoints, duplicate ids or triples,
            wrong edge direction, or patterns outside the supported dialect.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GraphParseError(f"graph document is not UTF-8: {exc}") from None
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"malformed graph document: {exc}") from None
    return _graph_from_document(doc)


def read_graph(path: str | Path) -> FaceAttackGraph:
    with open(path, "rb") as fh:
        return load_graph(fh)


def reference_graph() -> FaceAttackGraph:
    """The bundled reference graph (six attack types plus bona fide)."""
    data = resources.files("fakg").joinpath("data/reference_fakg.json").read_bytes()
    return load_graph(data)


def _require(cond: bool, msg: str, exc: type[GraphError] = GraphParseError) -> None:
    if not cond:
        raise exc(msg)


def _graph_from_document(doc) -> FaceAttackGraph:
    _require(isinstance(doc, dict), "graph document must be a JSON object")
    unknown = set(doc) - set(_TOP_KEYS)
    _require(not unknown, f"unknown top-level keys: {sorted(unknown)}")
    for key in ("version", "entities", "relations", "labels"):
        _require(key in doc, f"missing top-level key {key!r}")
    _require(doc["version"] == FORMAT_VERSION, f"unsupported version {doc['version']!r}")
    _require(isinstance(doc["entities"], list), "'entities' must be a list")
    _require(isinstance(doc["relations"], list), "'relations' must be a list")
    _require(isinstance(doc["labels"], dict), "'labels' must be an object")

    entities: dict[str, Entity] = {}
    for i, raw in enumerate(doc["entities"]):
        ent = _parse_entity(raw, i)
        if ent.id in entities:
            raise GraphIntegrityError(f"duplicate entity id {ent.id!r}")
        entities[ent.id] = ent

    relations: list[Relation] = []
    seen: set[tuple[str, str, str]] = set()
    for i, raw in enumerate(doc["relations"]):
        rel = _parse_relation(raw, i)
        for end in (rel.attack, rel.feature):
            if end not in entities:
                raise GraphIntegrityError(f"relation {rel.key} references missing entity {end!r}")
        if not entities[rel.attack].is_attack:
            raise GraphIntegrityError(
                f"relation {rel.key}: source {rel.attack!r} is not an attack_type"
            )
        if entities[rel.feature].is_attack:
            raise GraphIntegrityError(
                f"relation {rel.key}: target {rel.feature!r} is not a feature"
            )
        if rel.key in seen:
            raise GraphIntegrityError(f"duplicate relation triple {rel.key}")
        seen.add(rel.key)
        for p in rel.patterns:
            reason = check_pattern(p)
            if reason:
                raise GraphIntegrityError(f"relation {rel.key}: invalid pattern {p!r}: {reason}")
        relations.append(rel)

    labels: dict[str, str] = {}
    covered: dict[str, str] = {}
    for label, target in doc["labels"].items():
        _require(isinstance(target, str), f"label {label!r} must map to an entity id")
        if target not in entities:
            raise GraphIntegrityError(f"label {label!r} references missing entity {target!r}")
        if not entities[target].is_attack:
            raise GraphIntegrityError(f"label {label!r} maps to non-attack entity {target!r}")
        if target in covered:
            raise GraphIntegrityError(
                f"attack {target!r} labelled twice ({covered[target]!r}, {label!r})"
            )
        covered[target] = label
        labels[label] = target
    missing = [eid for eid, e in entities.items() if e.is_attack and eid not in covered]
    if missing:
        raise GraphIntegrityError(f"attack entities without a label: {missing}")
    keys = [label_key(k) for k in labels]
    if len(set(keys)) != len(keys):
        raise GraphIntegrityError("labels collide after case/punctuation folding")

    by_key = {r.key: r for r in relations}
    conflicts = None
    if doc.get("conflicts") is not None:
        raw_conf = doc["conflicts"]
        _require(isinstance(raw_conf, dict), "'conflicts' must be an object")
        conflicts = {}
        for attack, triples in raw_conf.items():
            if attack not in entities:
                raise GraphIntegrityError(f"conflicts entry for missing entity {attack!r}")
            if not entities[attack].is_attack:
                raise GraphIntegrityError(f"conflicts entry for non-attack {attack!r}")
            _require(isinstance(triples, list), f"conflicts[{attack!r}] must be a list")
            refs = []
            for t in triples:
                _require(
                    isinstance(t, dict) and set(t) == _TRIPLE_KEYS,
                    f"conflicts[{attack!r}] entries need exactly {sorted(_TRIPLE_KEYS)}",
                )
                key = (t["attack"], t["predicate"], t["feature"])
                if key not in by_key:
                    raise GraphIntegrityError(f"conflicts[{attack!r}] references unknown triple {key}")
                if key[0] == attack:
                    raise GraphIntegrityError(
                        f"conflicts[{attack!r}] lists its own relation {key}"
                    )
                ref = by_key[key]
                if ref not in refs:
                    refs.append(ref)
            conflicts[attack] = tuple(refs)

    return FaceAttackGraph(entities, tuple(relations), labels, conflicts)


def _parse_entity(raw, i: int) -> Entity:
    _require(isinstance(raw, dict), f"entity #{i} must be an object")
    unknown = set(raw) - _ENTITY_KEYS
    _require(not unknown, f"entity #{i}: unknown keys {sorted(unknown)}")
    for key in ("id", "name", "kind"):
        _require(key in raw, f"entity #{i}: missing {key!r}")
    eid = raw["id"]
    _require(isinstance(eid, str) and eid, f"entity #{i}: id must be a non-empty string", GraphIntegrityError)
    _require(eid == eid.strip(), f"entity {eid!r}: id has surrounding whitespace", GraphIntegrityError)
    _require(isinstance(raw["name"], str) and raw["name"].strip(), f"entity {eid!r}: empty name")
    try:
        kind = EntityKind(raw["kind"])
    except ValueError:
        raise GraphParseError(f"entity {eid!r}: unknown kind {raw['kind']!r}") from None
    if kind is EntityKind.ATTACK_TYPE:
        scope_raw = raw.get("feature_scope", "not_applicable")
        _require(
            scope_raw == "not_applicable",
            f"entity {eid!r}: attack types cannot carry a feature_scope",
            GraphIntegrityError,
        )
        scope = FeatureScope.NOT_APPLICABLE
    else:
        _require("feature_scope" in raw, f"entity {eid!r}: features need a feature_scope")
        _require(
            raw["feature_scope"] in ("common", "specific"),
            f"entity {eid!r}: feature_scope must be 'common' or 'specific'",
        )
        scope = FeatureScope(raw["feature_scope"])
    aliases = raw.get("aliases", [])
    _require(isinstance(aliases, list), f"entity {eid!r}: aliases must be a list")
    for a in aliases:
        _require(isinstance(a, str) and a.strip(), f"entity {eid!r}: empty alias", GraphIntegrityError)
    return Entity(eid, raw["name"], kind, scope, tuple(aliases))


def _parse_relation(raw, i: int) -> Relation:
    _require(isinstance(raw, dict), f"relation #{i} must be an object")
    unknown = set(raw) - _RELATION_KEYS
    _require(not unknown, f"relation #{i}: unknown keys {sorted(unknown)}")
    for key in ("attack", "predicate", "feature"):
        _require(isinstance(raw.get(key), str) and raw[key], f"relation #{i}: missing {key!r}")
    patterns = raw.get("patterns", [])
    _require(isinstance(patterns, list), f"relation #{i}: patterns must be a list")
    return Relation(raw["attack"], raw["predicate"], raw["feature"], tuple(patterns))


# -- serialization -----------------------------------------------------------


def _entity_to_dict(e: Entity) -> dict:
    out = {"id": e.id, "name": e.name, "kind": e.kind.value}
    if not e.is_attack:
        out["feature_scope"] = e.feature_scope.value
    out["aliases"] = list(e.aliases)
    return out


def _relation_to_dict(r: Relation) -> dict:
    return {
        "attack": r.attack,
        "predicate": r.predicate,
        "feature": r.feature,
        "patterns": list(r.patterns),
    }


def graph_to_dict(g: FaceAttackGraph) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "entities": [_entity_to_dict(e) for e in g.entities.values()],
        "relations": [_relation_to_dict(r) for r in g.relations],
        "labels": dict(g.labels),
    }
    if g.conflicts is not None:
        doc["conflicts"] = {
            a: [{"attack": r.attack, "predicate": r.predicate, "feature": r.feature} for r in refs]
            for a, refs in g.conflicts.items()
        }
    return doc


def dump_graph(g: FaceAttackGraph) -> bytes:
    return (json.dumps(graph_to_dict(g), indent=2, ensure_ascii=False) + "\n").encode("utf-8")


# -- queries ----------------------------------------------------------------


def _alias_key(alias: str) -> str:
    return " ".join(alias.casefold().split())


def validate_graph(g: FaceAttackGraph) -> list[Diagnostic]:
    """Soft consistency findings for a loaded graph. Never raises."""
    diags: list[Diagnostic] = []
    for eid, ent in g.entities.items():
        if ent.is_attack:
            if not g.relations_from(eid):
                diags.append(Diagnostic("attack_without_relations", f"attack {eid!r} has no relations", (eid,)))
        elif not g.neighbors(eid):
            diags.append(Diagnostic("orphan_feature", f"feature {eid!r} has no incident relation", (eid,)))

    owners: dict[str, list[str]] = {}
    for eid, ent in g.entities.items():
        for form in {_alias_key(a) for a in ent.surface_forms}:
            owners.setdefault(form, []).append(eid)
    for form, ids in owners.items():
        if len(ids) > 1:
            ids = sorted(ids)
            diags.append(
                Diagnostic("alias_collision", f"alias {form!r} shared by {', '.join(ids)}", tuple(ids))
            )

    for r in g.relations:
        for pat in g.compiled_patterns(r):
            if pat.search("") is not None:
                diags.append(
                    Diagnostic(
                        "empty_match_pattern",
                        f"relation {r} has pattern {pat.pattern!r} matching the empty string",
                        r.key,
                    )
                )
    return diags


def _bfs(g: FaceAttackGraph, source: str, cutoff: int | None = None) -> dict[str, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        d = dist[u]
        if cutoff is not None and d >= cutoff:
            continue
        for v in g._adjacency[u]:
            if v not in dist:
                dist[v] = d + 1
                queue.append(v)
    return dist


def shortest_distance(g: FaceAttackGraph, u: str, v: str) -> int | None:
    """Undirected hop count between two entities, or ``None`` when unreachable."""
    g.entity(u)
    g.entity(v)
    if u == v:
        return 0
    return _bfs(g, u).get(v)


def ego_subgraph(g: FaceAttackGraph, center: str, k: int) -> Subgraph:
    """Entities within ``k`` undirected hops of ``center`` and their induced relations."""
    g.entity(center)
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    nodes = frozenset(_bfs(g, center, cutoff=k))
    edges = tuple(r for r in g.relations if r.attack in nodes and r.feature in nodes)
    return Subgraph(center, k, nodes, edges)


def support_sets(g: FaceAttackGraph, attack: str, policy: str = "explicit") -> SupportSets:
    """Relations supporting ``attack`` and relations incompatible with it.

    The supporting set holds every relation sourced at ``attack``. The
    incompatible set is derived as all foreign relations whose feature is
    attack-specific and not shared with ``attack``. With ``policy="explicit"``
    a per-attack entry in the graph's ``conflicts`` table replaces the derived
    set; ``policy="derived"`` ignores that table.
    """
    if policy not in ("explicit", "derived"):
        raise ValueError(f"unknown conflict policy {policy!r}")
    ent = g.entity(attack)
    if not ent.is_attack:
        raise ValueError(f"{attack!r} is not an attack_type entity")
    own = g.relations_from(attack)
    s_plus = frozenset(own)
    if policy == "explicit" and g.conflicts is not None and attack in g.conflicts:
        return SupportSets(attack, s_plus, frozenset(g.conflicts[attack]))
    own_features = {r.feature for r in own}
    s_minus = frozenset(
        r
        for r in g.relations
        if r.attack != attack
        and g.entities[r.feature].feature_scope is FeatureScope.SPECIFIC
        and r.feature not in own_features
    )
    return SupportSets(attack, s_plus, s_minus)


def attack_node_for_label(g: FaceAttackGraph, label: str) -> str:
    """Attack entity id for a fine-grained label; spelling-insensitive."""
    label = getattr(label, "value", label)
    if label in g.labels:
        return g.labels[label]
    try:
        return g._label_keys[label_key(label)]
    except KeyError:
        raise UnknownLabelError(label) from None
