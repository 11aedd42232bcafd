"""How much do experts agree, and what survives a consensus rule?

Three simulated pathologists label the same twelve nuclei, two of them
re-label a few nuclei in a second session, and each also clicks nucleus
positions on an image. The demo summarizes inter- and intra-observer
agreement and then derives a consensus point set at increasing quorum.
"""

import numpy as np

from tmalab.panel import (
    LabelMatrix,
    RepeatObservation,
    agreement_report,
    gold_standard,
    majority_vote,
)

EXPERTS = ("anna", "ben", "chio")

rng = np.random.default_rng(21)
object_ids = tuple(f"n{i:02d}" for i in range(12))
labels = []
confidence = []
for i in range(12):
    truth = "cancerous" if i % 3 else "benign"
    row = []
    conf = []
    for j in range(3):
        flip = rng.uniform() < 0.15
        lab = ("benign" if truth == "cancerous" else "cancerous") if flip else truth
        row.append(lab)
        conf.append(("certainly", "probably", "maybe")[int(rng.integers(3))])
    labels.append(row)
    confidence.append(conf)
matrix = LabelMatrix(object_ids, EXPERTS, labels, confidence)

votes = majority_vote(matrix)
disputed = [v.object_id for v in votes if v.label == "disputed"]
print(f"majority vote: {sum(v.label == 'cancerous' for v in votes)} cancerous, "
      f"{sum(v.label == 'benign' for v in votes)} benign, "
      f"{len(disputed)} tied")

repeats = [
    RepeatObservation("anna", "n01", "cancerous", "certainly", "cancerous", "probably"),
    RepeatObservation("anna", "n04", "benign", "maybe", "cancerous", "maybe"),
    RepeatObservation("anna", "n08", "cancerous", "probably", "cancerous", "probably"),
    RepeatObservation("ben", "n02", "cancerous", "probably", "cancerous", "certainly"),
    RepeatObservation("ben", "n07", "cancerous", "maybe", "cancerous", "probably"),
]
rep = agreement_report(matrix, repeats)
print(f"{rep.n_unanimous}/{rep.n_objects} unanimous "
      f"({rep.n_unanimous_by_class}), {rep.n_disputed} disputed")
for eid, err in sorted(rep.intra_error.items()):
    print(f"intra-observer flip rate for {eid}: {err:.0%}")

# Each expert's clicks scatter around the same eight true positions.
truth_xy = rng.uniform(10.0, 90.0, size=(8, 2))
clicks = {}
for eid in EXPERTS:
    seen = truth_xy[rng.uniform(size=8) < 0.85]
    clicks[eid] = seen + rng.normal(0.0, 1.0, size=seen.shape)

for quorum in (1, 2, 3):
    consensus = gold_standard(clicks, match_radius=4.0, quorum=quorum)
    print(f"quorum {quorum}: {len(consensus)} consensus nuclei")
