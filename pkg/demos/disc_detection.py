"""Train a detector on synthetic disc images and measure how well it
finds discs it has never seen.

Positives come from the known disc centers; negatives from the vertices
of the Voronoi diagram of those centers, which are by construction the
points locally farthest from every disc. Detection condenses the
per-pixel probability map into modes with mean shift.
"""

from pathlib import Path

import numpy as np

from tmalab.detection import (
    MeanShiftConfig,
    detect_nuclei,
    match_detections,
    probability_map,
    save_detections_csv,
    save_probability_map_png,
    voronoi_negative_samples,
)
from tmalab.forest import ForestConfig, train_forest
from tmalab.images import extract_patch
from tmalab.synthetic import generate_disc_image

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

WINDOW = 33
rng = np.random.default_rng(7)

patches = []
labels = []
for _ in range(3):
    img, centers, radii = generate_disc_image(rng, n_discs=25)
    for x, y in np.round(centers).astype(int):
        patches.append(extract_patch(img, (int(x), int(y)), WINDOW).pixels)
        labels.append(1)
    h, w = img.pixels.shape
    for x, y in voronoi_negative_samples(centers, (w, h),
                                         min_distance=float(radii.min())):
        patches.append(extract_patch(img, (int(x), int(y)), WINDOW).pixels)
        labels.append(0)

print(f"training on {len(patches)} patches "
      f"({sum(labels)} disc centers, {len(labels) - sum(labels)} background)")
forest = train_forest(
    np.stack(patches), np.array(labels),
    ForestConfig(n_trees=12, max_depth=10, window=WINDOW, rng_seed=0),
)

test_img, truth, truth_radii = generate_disc_image(np.random.default_rng(1234))
pmap = probability_map(forest, test_img, stride=1)
save_probability_map_png(pmap, out_dir / "disc_probability.png")

detections = detect_nuclei(forest, test_img, MeanShiftConfig(radius=6.0), stride=1)
save_detections_csv(detections, "demo", out_dir / "disc_detections.csv")

m = match_detections(detections, truth, match_radius=float(truth_radii.mean()))
errors = [np.hypot(detections[i].x - truth[j][0], detections[i].y - truth[j][1])
          for i, j in m.matches]
print(f"unseen image: {len(detections)} detections for {len(truth)} discs")
print(f"precision {m.precision:.3f}  recall {m.recall:.3f}  f1 {m.f1:.3f}")
print(f"mean localization error {np.mean(errors):.2f}px over {len(errors)} matches")
print(f"wrote {out_dir / 'disc_probability.png'} and {out_dir / 'disc_detections.csv'}")
