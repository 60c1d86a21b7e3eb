"""
A tour of the bundled face-attack graph
=======================================

Load the reference graph, look at one attack's neighbourhood and the
support and conflict sets the reward uses.
"""

from fakg import ego_subgraph, reference_graph, support_sets, validate_graph
from fakg.graph import attack_node_for_label, shortest_distance

g = reference_graph()
print(f"{len(g.entities)} entities, {len(g.relations)} relations")
print("diagnostics:", validate_graph(g))

# the attack node behind a dataset label
print_node = attack_node_for_label(g, "Print")
print("Print ->", print_node)

# the 1-hop ego network is the attack plus the features it links to
sub = ego_subgraph(g, print_node, 1)
for rel in sub.edges:
    print("  ", rel.attack, rel.predicate, rel.feature)

# at 2 hops other attacks sharing a feature join in
two = ego_subgraph(g, print_node, 2)
print("2-hop attacks:", sorted(n for n in two.nodes if g.entities[n].is_attack))
print("print <-> replay distance:", shortest_distance(g, "print", "replay"))

# S+ is what the attack does; S- is what other attacks do on specific features
sets = support_sets(g, print_node)
print(f"|S+| = {len(sets.s_plus)}, |S-| = {len(sets.s_minus)}")
for rel in sorted(sets.s_minus, key=lambda r: r.key)[:5]:
    print("   conflicting:", rel.key)
