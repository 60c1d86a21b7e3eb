"""
Building a filtered QA corpus offline
=====================================

Run the synthesis pipeline with the template stub clients, look at what the
filters threw away and export instruction-tuning rows.
"""

import json

from fakg import reference_graph
from fakg.synthesis import ManifestEntry, PipelineConfig, run_pipeline, to_agit_record

g = reference_graph()
labels = ["Real Face", "Print", "Replay", "FaceSwap", "Attribute-Edit", "Video-Driven", "Adversarial", "3D-Mask"]
manifest = [ManifestEntry(f"s{i:02d}", f"images/{i:02d}.png", labels[i % len(labels)]) for i in range(16)]

result = run_pipeline(manifest, g, PipelineConfig(k=2, seed=3))
print(json.dumps(result.stats.to_dict(), indent=2))
print("reconciles:", result.stats.reconciles())

# skipped entries carry the reason (here the unknown 3D-Mask label)
for sid, why in result.skipped:
    print("skipped", sid, "-", why)

for rec in result.rejected:
    print("rejected", rec.sample_id, rec.verdict.reason.value, "-", rec.verdict.detail)

rec = result.corpus[0]
print("\nquestion:", rec.question)
print("skeleton triples:", rec.provenance.skeleton.cited_triples)
print("instruction-tuning row:", json.dumps(to_agit_record(rec).to_dict(), indent=2))
