"""Let a simulated expert correct a live forest and replay the log.

Each correction reweights the trees that disagreed with the expert, so
the weighted vote margin for the asserted label never drops. Every few
corrections the forest also grows fresh trees trained on the buffered
expert labels. The append-only correction log is the whole session
state: replaying it over the starting forest reproduces the final forest
byte for byte.
"""

import tempfile
from pathlib import Path

import numpy as np

from tmalab.forest import ForestConfig, forest_to_json, train_forest
from tmalab.images import load_image, to_gray
from tmalab.online import (
    Correction,
    OnlineParams,
    OnlineSession,
    append_correction_log,
    read_correction_log,
    replay_corrections,
)
from tmalab.pipeline import collect_training_data, load_manifest
from tmalab.synthetic import generate_study

root = Path(tempfile.mkdtemp(prefix="tmalab_online_"))
ds = generate_study(root, seed=3, n_patients=6, n_annotated=3)
entries = load_manifest(ds.manifest_csv)
training = collect_training_data(entries, ds.annotations_dir, 17)
forest = train_forest(
    np.stack(training.patches), np.array(training.labels),
    ForestConfig(n_trees=8, max_depth=8, window=17, rng_seed=0),
)
images = {e.spot_id: to_gray(load_image(e.image_path)) for e in entries}

params = OnlineParams(beta=0.5, k_new=1, buffer_batch=4)
session = OnlineSession(forest, training.patches, training.labels, images,
                        params, seed=11)
log_path = root / "corrections.jsonl"

rng = np.random.default_rng(8)
ids = sorted(images)
print(f"{forest.n_trees} trees to start; applying 12 expert corrections")
for k in range(12):
    c = Correction(
        spot_id=ids[int(rng.integers(len(ids)))],
        x=int(rng.integers(10, 86)),
        y=int(rng.integers(10, 86)),
        asserted_label=forest.classes[int(rng.integers(2))],
        expert_id="expert-1",
    )
    append_correction_log(log_path, c)
    before, after = session.apply_correction(c)
    print(f"  {k + 1:2d}. {c.spot_id} ({c.x:2d},{c.y:2d}) -> {c.asserted_label:10s} "
          f"margin {before:+.3f} -> {after:+.3f}")

print(f"forest now has {session.forest.n_trees} trees "
      f"(version {session.version})")

twin = OnlineSession(forest, training.patches, training.labels, images,
                     params, seed=11)
replayed = replay_corrections(twin, read_correction_log(log_path))
same = forest_to_json(replayed) == forest_to_json(session.forest)
print(f"replaying {log_path.name} reproduces the forest exactly: {same}")
