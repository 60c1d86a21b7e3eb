"""Independent oracles and random input generators shared by the test suite.

Nothing here calls into the code under test except to hand it a document; the
oracles work on plain dicts, lists and sets.
"""

from __future__ import annotations

import json
import random
import time
from collections import Counter, deque
from contextlib import contextmanager
from fractions import Fraction

FINE = ["RealFace", "Print", "Replay", "FaceSwap", "AttributeEdit", "VideoDriven", "Adversarial"]
P2_MAP = {"RealFace": "RealFace", "Print": "Physical", "Replay": "Physical"}
P1_MAP = {"RealFace": "RealFace"}
SPACES = {
    "P1": ["RealFace", "Attack"],
    "P2": ["RealFace", "Physical", "Digital"],
    "P3": FINE,
}


def coarse(label: str, protocol: str) -> str:
    if protocol == "P3":
        return label
    if protocol == "P2":
        return P2_MAP.get(label, "Digital")
    return P1_MAP.get(label, "Attack")


def toy_doc(edges, scopes=None, patterns=None, aliases=None, conflicts=None):
    """Graph document over ``edges`` = [(attack, feature), ...] with predicate "rel"."""
    scopes = scopes or {}
    patterns = patterns or {}
    aliases = aliases or {}
    attacks, features = [], []
    for a, f in edges:
        if a not in attacks:
            attacks.append(a)
        if f not in features:
            features.append(f)
    ents = [{"id": a, "name": a, "kind": "attack_type", "aliases": aliases.get(a, [])} for a in attacks]
    ents += [
        {"id": f, "name": f, "kind": "feature", "feature_scope": scopes.get(f, "specific"), "aliases": aliases.get(f, [])}
        for f in features
    ]
    rels = [
        {"attack": a, "predicate": "rel", "feature": f, "patterns": patterns.get((a, f), [])} for a, f in edges
    ]
    doc = {"version": 1, "entities": ents, "relations": rels, "labels": {f"L_{a}": a for a in attacks}}
    if conflicts is not None:
        doc["conflicts"] = conflicts
    return doc


def random_graph_doc(rng: random.Random, max_nodes: int = 50) -> dict:
    """Random bipartite graph document; may be disconnected and have isolated features."""
    n = rng.randint(2, max_nodes)
    n_att = rng.randint(1, n - 1)
    attacks = [f"a{i}" for i in range(n_att)]
    features = [f"f{i}" for i in range(n - n_att)]
    density = rng.choice([0.05, 0.1, 0.2, 0.4])
    preds = ["shows", "lacks", "distorts"]
    rels = []
    for a in attacks:
        for f in features:
            for p in preds:
                if rng.random() < density / len(preds):
                    rels.append({"attack": a, "predicate": p, "feature": f, "patterns": _rand_patterns(rng, f)})
    ents = [{"id": a, "name": f"Attack {a}", "kind": "attack_type", "aliases": []} for a in attacks]
    ents += [
        {
            "id": f,
            "name": f"feature {f}",
            "kind": "feature",
            "feature_scope": rng.choice(["common", "specific"]),
            "aliases": [f"alias{f}"] if rng.random() < 0.5 else [],
        }
        for f in features
    ]
    rng.shuffle(ents)
    return {"version": 1, "entities": ents, "relations": rels, "labels": {f"Label {a}": a for a in attacks}}


def _rand_patterns(rng, f):
    choice = rng.random()
    if choice < 0.3:
        return []
    if choice < 0.7:
        return [f"{f} marker"]
    return [f"(?:{f}|{f}x)+ trace", r"\b" + f + r"[0-9]?\b"]


def doc_bytes(doc) -> bytes:
    return json.dumps(doc).encode("utf-8")


def adjacency(doc) -> dict[str, set[str]]:
    adj = {e["id"]: set() for e in doc["entities"]}
    for r in doc["relations"]:
        adj[r["attack"]].add(r["feature"])
        adj[r["feature"]].add(r["attack"])
    return adj


def bfs_oracle(doc, center: str, k: int):
    """(nodes, sorted edge triples) of the induced k-hop ego network."""
    adj = adjacency(doc)
    dist = {center: 0}
    q = deque([center])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    nodes = {n for n, d in dist.items() if d <= k}
    edges = sorted(
        (r["attack"], r["predicate"], r["feature"])
        for r in doc["relations"]
        if r["attack"] in nodes and r["feature"] in nodes
    )
    return nodes, edges


def floyd_distances(doc) -> dict[tuple[str, str], float]:
    ids = [e["id"] for e in doc["entities"]]
    inf = float("inf")
    d = {(u, v): (0 if u == v else inf) for u in ids for v in ids}
    for r in doc["relations"]:
        d[r["attack"], r["feature"]] = d[r["feature"], r["attack"]] = 1
    for m in ids:
        for u in ids:
            dum = d[u, m]
            if dum == inf:
                continue
            for v in ids:
                if dum + d[m, v] < d[u, v]:
                    d[u, v] = dum + d[m, v]
    return d


def kg_reward_oracle(grounded, s_plus, s_minus, eta=0.5, eps=1e-8):
    """Set-enumeration reference for (r_match, r_conflict, r_kg) over triple tuples."""
    grounded = set(grounded)
    hp = len([t for t in s_plus if t in grounded])
    hm = len([t for t in s_minus if t in grounded])
    rm = hp / (len(s_plus) + eps)
    rc = hm / (len(s_minus) + eps)
    return rm, rc, min(1.0, max(0.0, rm - eta * rc))


def eval_oracle(pairs, protocol):
    """Brute-force per-category metrics and weighted totals by direct counting.

    Per-category rates are plain float divisions of counts (frr = 1 - acc,
    hter = (far + frr) / 2); totals are exact rationals rounded once.
    """
    cats = SPACES[protocol]
    counts = Counter((coarse(t, protocol), coarse(p, protocol)) for t, p in pairs)
    n = sum(counts.values())
    out = {}
    acc_sum = hter_sum = Fraction(0)
    for c in cats:
        support = sum(v for (t, _), v in counts.items() if t == c)
        correct = counts[c, c]
        false_accept = sum(v for (t, p), v in counts.items() if t != c and p == c)
        neg = n - support
        acc = correct / support if support else 0.0
        far = false_accept / neg if neg else 0.0
        frr = 1.0 - acc
        out[c] = {"support": support, "acc": acc, "far": far, "frr": frr, "hter": (far + frr) / 2}
        exact_acc = Fraction(correct, support) if support else Fraction(0)
        exact_far = Fraction(false_accept, neg) if neg else Fraction(0)
        acc_sum += support * exact_acc
        hter_sum += support * (exact_far + 1 - exact_acc) / 2
    out["#total"] = {"acc": float(acc_sum / n), "hter": float(hter_sum / n), "support": n}
    return out


CRITERIA_LINES: list[str] = []


@contextmanager
def criterion(number: int, title: str, limit_s: float):
    """Time a block, record a PASS/FAIL line, and fail if it runs past ``limit_s``."""
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"FAIL criterion {number}: {title} ({time.perf_counter() - t0:.2f}s): {type(exc).__name__}"
        CRITERIA_LINES.append(line)
        print(line)
        raise
    elapsed = time.perf_counter() - t0
    ok = elapsed < limit_s
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({elapsed:.2f}s, limit {limit_s:g}s)"
    CRITERIA_LINES.append(line)
    print(line)
    assert ok, line
