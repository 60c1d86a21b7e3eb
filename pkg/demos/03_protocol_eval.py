"""
Scoring a detector under the three protocols
============================================

A made-up detector that is good at physical attacks and weak on digital
ones, evaluated at binary, coarse and fine granularity.
"""

import random

from fakg.evaluation import PredictionRecord, binary_hter, evaluate, format_table
from fakg.labels import FineLabel

rng = random.Random(0)
labels = [m.value for m in FineLabel]
skill = {"RealFace": 0.95, "Print": 0.9, "Replay": 0.85, "FaceSwap": 0.6,
         "AttributeEdit": 0.5, "VideoDriven": 0.55, "Adversarial": 0.4}

records = []
for i in range(2000):
    truth = rng.choice(labels)
    pred = truth if rng.random() < skill[truth] else rng.choice(labels)
    records.append(PredictionRecord.fine(str(i), truth, pred))

for proto in ("P1", "P2", "P3"):
    print(format_table(evaluate(records, proto)))
    print()

b = binary_hter(records)
print(f"binary FAR={b.far:.4f} FRR={b.frr:.4f} HTER={b.hter:.4f}")

# predicting "real" for everything: HTER 0.5 on every attack category
lazy = [PredictionRecord.fine(r.sample_id, r.truth, "RealFace") for r in records]
print(format_table(evaluate(lazy, "P3")))
