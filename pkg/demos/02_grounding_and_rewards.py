"""
From a rationale to a group-relative advantage
==============================================

Ground two model responses against the graph, score them and normalise the
rewards within the group.
"""

from fakg import reference_graph, score_group
from fakg.grounding import GroundingMode, StubVerifier, ground, parse_response, render_response

g = reference_graph()

good = render_response(
    "Flattened skin texture, a halftone dot lattice pattern and visible paper edges.", "Print"
)
wrong = render_response("Moire stripes and screen glare from a display.", "Replay")
sloppy = "Print, probably."

# the parser splits think and answer; a missing segment just means r_fmt = 0
for raw in (good, sloppy):
    p = parse_response(raw)
    print(repr(p.think), repr(p.answer), p.format_valid)

# pattern grounding is deterministic; the stub verifier checks leftovers
think = parse_response(good).think
for mode in (GroundingMode.PATTERN_ONLY, GroundingMode.FALLBACK_VERIFIER):
    rep = ground(think, g, StubVerifier(), mode)
    print(mode.value, [gr.relation.key for gr in rep.grounded], "verifier saw", rep.verifier_calls)

# one group, three samples, ground truth Print
gs = score_group([good, wrong, sloppy], "Print", g)
for b, a in zip(gs.breakdowns, gs.advantages):
    print(f"acc={b.r_acc} fmt={b.r_fmt} kg={b.r_kg:.3f} total={b.total:.3f} advantage={a:+.3f}")
print(f"mu={gs.mu:.4f} sigma={gs.sigma:.4f}")
