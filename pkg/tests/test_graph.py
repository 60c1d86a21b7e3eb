import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fakg.graph import (
    FeatureScope,
    GraphIntegrityError,
    GraphParseError,
    UnknownEntityError,
    UnknownLabelError,
    attack_node_for_label,
    check_pattern,
    dump_graph,
    ego_subgraph,
    load_graph,
    reference_graph,
    shortest_distance,
    support_sets,
    validate_graph,
)

from helpers import bfs_oracle, doc_bytes, floyd_distances, random_graph_doc, toy_doc

TOY = [("A1", "f1"), ("A1", "f2"), ("A2", "f2"), ("A2", "f3")]


def keys(rels):
    return {r.key for r in rels}


# -- loading -------------------------------------------------------------------------


def test_minimal_document():
    g = load_graph(doc_bytes(toy_doc([("a", "f")])))
    assert len(g.entities) == 2
    assert len(g.relations) == 1


def test_accepts_str_bytes_and_file(tmp_path):
    doc = doc_bytes(toy_doc(TOY))
    p = tmp_path / "g.json"
    p.write_bytes(doc)
    with open(p, "rb") as fh:
        g3 = load_graph(fh)
    assert load_graph(doc) == load_graph(doc.decode()) == g3


def test_dangling_feature_names_id():
    doc = toy_doc(TOY)
    doc["relations"].append({"attack": "A1", "predicate": "rel", "feature": "ghost_feature", "patterns": []})
    with pytest.raises(GraphIntegrityError, match="ghost_feature"):
        load_graph(doc_bytes(doc))


@pytest.mark.parametrize(
    "mutate, needle",
    [
        (lambda d: d["entities"].append(dict(d["entities"][0])), "A1"),
        (lambda d: d["relations"].append(dict(d["relations"][0])), "f1"),
        (lambda d: d["relations"].append({"attack": "A1", "predicate": "rel", "feature": "A2", "patterns": []}), "A2"),
        (lambda d: d["relations"].append({"attack": "f1", "predicate": "rel", "feature": "f2", "patterns": []}), "f1"),
        (lambda d: d["relations"][0].update(patterns=["(?=lookahead)"]), "lookahead"),
        (lambda d: d["relations"][0].update(patterns=[r"(a)\1"]), "f1"),
        (lambda d: d["relations"][0].update(patterns=["unbalanced("]), "f1"),
    ],
    ids=["dup-entity", "dup-triple", "attack-attack", "feature-source", "lookahead", "backref", "bad-regex"],
)
def test_integrity_failures_name_offender(mutate, needle):
    doc = toy_doc(TOY)
    mutate(doc)
    with pytest.raises(GraphIntegrityError, match=needle):
        load_graph(doc_bytes(doc))


@pytest.mark.parametrize(
    "raw",
    [b"not json", b"[]", b'{"version": 2, "entities": [], "relations": [], "labels": {}}'],
)
def test_parse_failures(raw):
    with pytest.raises(GraphParseError):
        load_graph(raw)


def test_unknown_top_level_key_rejected():
    doc = toy_doc(TOY)
    doc["extra"] = 1
    with pytest.raises(GraphParseError, match="extra"):
        load_graph(doc_bytes(doc))


def test_key_order_irrelevant():
    doc = toy_doc(TOY)
    shuffled = {k: doc[k] for k in reversed(list(doc))}
    assert load_graph(doc_bytes(shuffled)) == load_graph(doc_bytes(doc))


def test_pattern_dialect():
    assert check_pattern(r"\blattice\s+pattern(?:s)?\b") is None
    assert check_pattern("moir[eé]|screen") is None
    for bad in ["(?<=x)y", "(?!x)", "^start", "end$", r"\Aword", r"(x)\1", "(?P<n>x)", "(?i)x"]:
        assert check_pattern(bad) is not None, bad


def test_relation_order_preserved():
    doc = toy_doc(list(reversed(TOY)))
    g = load_graph(doc_bytes(doc))
    assert [r.key for r in g.relations] == [(a, "rel", f) for a, f in reversed(TOY)]


# -- reference graph ---------------------------------------------------------------


def test_reference_graph_contents():
    g = reference_graph()
    assert validate_graph(g) == []
    names = {g.entities[a].name for a in g.attack_ids}
    assert names == {"Bona Fide", "Print", "Replay", "FaceSwap", "Attribute-Edit", "Video-Driven", "Adversarial"}
    common = {g.entities[f].name for f in g.feature_ids if g.entities[f].feature_scope is FeatureScope.COMMON}
    assert {"skin texture", "global illumination"} <= {n.lower() for n in common}
    specific = {g.entities[f].name.lower() for f in g.feature_ids if g.entities[f].feature_scope is FeatureScope.SPECIFIC}
    assert {"lattice patterns", "geometric inconsistencies"} <= specific


def test_reference_round_trip_exact():
    g = reference_graph()
    blob = dump_graph(g)
    assert load_graph(blob) == g
    assert dump_graph(load_graph(blob)) == blob


def test_serialized_key_order():
    doc = toy_doc(TOY, conflicts={"A1": [{"attack": "A2", "predicate": "rel", "feature": "f3"}]})
    out = json.loads(dump_graph(load_graph(doc_bytes(doc))))
    assert list(out) == ["version", "entities", "relations", "labels", "conflicts"]


# -- validation ----------------------------------------------------------------------


def test_orphan_feature():
    doc = toy_doc(TOY)
    doc["entities"].append({"id": "lonely", "name": "lonely", "kind": "feature", "feature_scope": "common", "aliases": []})
    diags = validate_graph(load_graph(doc_bytes(doc)))
    assert [(d.code, d.ids) for d in diags] == [("orphan_feature", ("lonely",))]


def test_alias_collision_names_both():
    doc = toy_doc(TOY, aliases={"f1": ["moire"], "f3": ["Moire"]})
    diags = validate_graph(load_graph(doc_bytes(doc)))
    assert len(diags) == 1
    assert diags[0].code == "alias_collision"
    assert set(diags[0].ids) == {"f1", "f3"}


def test_empty_match_pattern_and_attack_without_relations():
    doc = toy_doc(TOY, patterns={("A1", "f1"): ["x*"]})
    doc["entities"].append({"id": "A9", "name": "A9", "kind": "attack_type", "aliases": []})
    doc["labels"]["L_A9"] = "A9"
    codes = sorted(d.code for d in validate_graph(load_graph(doc_bytes(doc))))
    assert codes == ["attack_without_relations", "empty_match_pattern"]


def test_validate_does_not_mutate():
    g = load_graph(doc_bytes(toy_doc(TOY)))
    before = dump_graph(g)
    validate_graph(g)
    assert dump_graph(g) == before


# -- distances and subgraphs ---------------------------------------------------------


def test_distance_examples():
    g = load_graph(doc_bytes(toy_doc([("A1", "f1"), ("A1", "f2"), ("A2", "f2")])))
    assert shortest_distance(g, "A1", "A1") == 0
    assert shortest_distance(g, "A1", "A2") == 2
    assert shortest_distance(g, "A2", "f1") == 3


def test_distance_unreachable_and_unknown():
    g = load_graph(doc_bytes(toy_doc([("A1", "f1"), ("A2", "f2")])))
    assert shortest_distance(g, "A1", "f2") is None
    with pytest.raises(UnknownEntityError):
        shortest_distance(g, "A1", "nope")


def test_ego_subgraph_examples():
    g = load_graph(doc_bytes(toy_doc(TOY)))
    s0 = ego_subgraph(g, "A1", 0)
    assert s0.nodes == {"A1"} and s0.edges == ()
    s1 = ego_subgraph(g, "A1", 1)
    assert s1.nodes == {"A1", "f1", "f2"}
    assert keys(s1.edges) == {("A1", "rel", "f1"), ("A1", "rel", "f2")}
    s2 = ego_subgraph(g, "A1", 2)
    assert s2.nodes == {"A1", "f1", "f2", "A2"}
    assert keys(s2.edges) == {("A1", "rel", "f1"), ("A1", "rel", "f2"), ("A2", "rel", "f2")}


def test_ego_subgraph_errors():
    g = load_graph(doc_bytes(toy_doc(TOY)))
    with pytest.raises(UnknownEntityError):
        ego_subgraph(g, "zzz", 1)
    with pytest.raises(ValueError):
        ego_subgraph(g, "A1", -1)


def test_content_hash_stable_and_sensitive():
    g = reference_graph()
    a = ego_subgraph(g, "print", 2)
    assert a.content_hash() == ego_subgraph(reference_graph(), "print", 2).content_hash()
    assert a.content_hash() != ego_subgraph(g, "print", 1).content_hash()


def test_distances_match_floyd():
    rng = random.Random(3)
    for _ in range(20):
        doc = random_graph_doc(rng, 20)
        g = load_graph(doc_bytes(doc))
        d = floyd_distances(doc)
        for (u, v), want in d.items():
            got = shortest_distance(g, u, v)
            assert got == (None if want == float("inf") else want)


graph_docs = st.builds(lambda seed: random_graph_doc(random.Random(seed), 30), st.integers(0, 10**9))


@settings(max_examples=60, deadline=None)
@given(doc=graph_docs, data=st.data())
def test_subgraph_properties(doc, data):
    g = load_graph(doc_bytes(doc))
    center = data.draw(st.sampled_from(sorted(g.entities)))
    prev = ego_subgraph(g, center, 0)
    assert prev.nodes == {center} and prev.edges == ()
    for k in range(1, 8):
        cur = ego_subgraph(g, center, k)
        assert prev.nodes <= cur.nodes
        assert keys(prev.edges) <= keys(cur.edges)
        nodes, edges = bfs_oracle(doc, center, k)
        assert cur.nodes == nodes and sorted(keys(cur.edges)) == edges
        prev = cur
    # saturation: a radius beyond the node count covers the whole component
    full = ego_subgraph(g, center, len(g.entities))
    comp, comp_edges = bfs_oracle(doc, center, len(g.entities) + 1)
    assert full.nodes == comp and sorted(keys(full.edges)) == comp_edges


# -- support sets --------------------------------------------------------------------


def _support_toy(conflicts=None):
    edges = [("A1", "fc"), ("A1", "fs1"), ("A2", "fc"), ("A2", "fs2")]
    return load_graph(doc_bytes(toy_doc(edges, scopes={"fc": "common"}, conflicts=conflicts)))


def test_support_sets_default_rule():
    s = support_sets(_support_toy(), "A1")
    assert keys(s.s_plus) == {("A1", "rel", "fc"), ("A1", "rel", "fs1")}
    assert keys(s.s_minus) == {("A2", "rel", "fs2")}


def test_support_sets_sole_owner():
    g = load_graph(doc_bytes(toy_doc([("A1", "f1"), ("A1", "f2")])))
    s = support_sets(g, "A1")
    assert keys(s.s_plus) == {r.key for r in g.relations}
    assert s.s_minus == frozenset()


def test_support_sets_explicit_override():
    g = _support_toy({"A1": [{"attack": "A2", "predicate": "rel", "feature": "fc"}]})
    assert keys(support_sets(g, "A1").s_minus) == {("A2", "rel", "fc")}
    assert keys(support_sets(g, "A1", policy="derived").s_minus) == {("A2", "rel", "fs2")}
    # attacks without an entry fall back to the derived rule
    assert keys(support_sets(g, "A2").s_minus) == {("A1", "rel", "fs1")}


def test_support_sets_errors():
    g = _support_toy()
    with pytest.raises(ValueError):
        support_sets(g, "fc")
    with pytest.raises(UnknownEntityError):
        support_sets(g, "nope")


def test_conflicts_must_reference_foreign_existing_triples():
    bad_own = {"A1": [{"attack": "A1", "predicate": "rel", "feature": "fc"}]}
    with pytest.raises(GraphIntegrityError):
        load_graph(doc_bytes(toy_doc([("A1", "fc"), ("A2", "fs2")], conflicts=bad_own)))
    missing = {"A1": [{"attack": "A2", "predicate": "rel", "feature": "fc"}]}
    with pytest.raises(GraphIntegrityError):
        load_graph(doc_bytes(toy_doc([("A1", "fc"), ("A2", "fs2")], conflicts=missing)))


@settings(max_examples=60, deadline=None)
@given(doc=graph_docs)
def test_support_set_invariants(doc):
    g = load_graph(doc_bytes(doc))
    for a in g.attack_ids:
        s = support_sets(g, a)
        assert not (s.s_plus & s.s_minus)
        assert s.s_plus == frozenset(r for r in g.relations if r.attack == a)
        assert all(r.attack != a for r in s.s_minus)


# -- labels ---------------------------------------------------------------------------


def test_attack_node_for_label():
    g = reference_graph()
    assert attack_node_for_label(g, "Print") == "print"
    assert attack_node_for_label(g, "Real Face") == "bona_fide"
    assert attack_node_for_label(g, "RealFace") == "bona_fide"
    with pytest.raises(UnknownLabelError, match="3D-Mask"):
        attack_node_for_label(g, "3D-Mask")
