"""
A toy policy learning to cite the graph
=======================================

A softmax policy over canned responses is trained with group-relative
advantages. The reward mixes accuracy, format and graph consistency, so the
policy drifts towards responses that are right and cite Print's relations.
"""

import numpy as np

from fakg import reference_graph
from fakg.sandbox import (
    ToyPolicy,
    TrainConfig,
    policy_gradient,
    reference_templates,
    sparkline,
    surrogate_loss,
    train,
)

g = reference_graph()
templates = reference_templates()
for t in templates:
    print(t.id, t.answer, "|", t.think[:70])

# the analytic gradient against central differences on one random setup
rng = np.random.default_rng(0)
pol = ToyPolicy(rng.normal(size=len(templates)))
group, adv = [0, 3, 3, 5], [0.7, -0.2, -0.2, 1.1]
num = np.zeros(len(templates))
for j in range(len(templates)):
    e = np.zeros(len(templates))
    e[j] = 1e-5
    num[j] = (surrogate_loss(ToyPolicy(pol.logits + e), group, adv)
              - surrogate_loss(ToyPolicy(pol.logits - e), group, adv)) / 2e-5
print("max |analytic - numeric|:", np.abs(policy_gradient(pol, group, adv) - num).max())

# the pinned reference run
final, trace = train(g, templates, TrainConfig(iterations=200, group_size=8, seed=7))
print(trace.summary())
print("expected r_kg ", sparkline([r.expected_kg for r in trace.records]))
print("expected total", sparkline([r.expected_total for r in trace.records]))
print("final policy:", np.round(final.probs, 3))
