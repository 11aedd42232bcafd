"""Randomized forests over pairwise region-intensity comparisons.

A feature compares the mean intensity of two axis-aligned rectangles
inside a square window and responds 1 when the first mean is strictly
smaller. The response depends only on the ordering of the two means, so
it is invariant under any positive affine transform of the intensities.
Trees threshold nothing else, which keeps the whole forest illumination
invariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_CLASSES = ("background", "nucleus")
FOREST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RelationalFeature:
    """Two half-open rectangles (x1, y1, x2, y2) in window coordinates."""

    rect1: tuple[int, int, int, int]
    rect2: tuple[int, int, int, int]

    def __post_init__(self):
        for rect in (self.rect1, self.rect2):
            x1, y1, x2, y2 = rect
            if not (0 <= x1 < x2 and 0 <= y1 < y2):
                raise ValueError(f"rectangle {rect} is empty or not canonical")


def _sample_rect(rng, window):
    # Corner coordinates are drawn uniformly from [0, window); zero-area
    # draws are rejected rather than clamped.
    while True:
        xa, ya, xb, yb = (int(v) for v in rng.integers(0, window, size=4))
        x1, x2 = sorted((xa, xb))
        y1, y2 = sorted((ya, yb))
        if x1 != x2 and y1 != y2:
            return (x1, y1, x2, y2)


def sample_feature(rng, window: int) -> RelationalFeature:
    """Draw a random region-comparison feature for the given window size."""
    return RelationalFeature(_sample_rect(rng, window), _sample_rect(rng, window))


def feature_space_cardinality(window: int) -> float:
    """Number of distinct features expressible in a window, as counted by
    four free corner coordinates per rectangle with order symmetry removed.

    Returned as a float; the count is astronomically large for realistic
    windows (about 2e13 at window 65) and fractional for tiny ones.
    """
    return (((window - 1) ** 4) / 4.0) ** 2


def integral_image(pixels: np.ndarray) -> np.ndarray:
    """Summed-area table with a zero first row and column.

    ii[r, c] equals pixels[:r, :c].sum(), so any rectangle sum costs four
    lookups. Integer input stays in int64 arithmetic, float input in
    float64; both are exact for the magnitudes a patch can produce.
    """
    p = np.asarray(pixels)
    dtype = np.float64 if np.issubdtype(p.dtype, np.floating) else np.int64
    h, w = p.shape
    ii = np.zeros((h + 1, w + 1), dtype=dtype)
    np.cumsum(np.cumsum(p, axis=0, dtype=dtype), axis=1, out=ii[1:, 1:])
    return ii


class _StackSource:
    """Feature responses for a stack of per-patch integral images."""

    def __init__(self, ii_stack):
        self.ii = ii_stack

    def responses(self, feature, idx):
        ii = self.ii
        x1, y1, x2, y2 = feature.rect1
        s1 = ii[idx, y2, x2] - ii[idx, y1, x2] - ii[idx, y2, x1] + ii[idx, y1, x1]
        a1 = (x2 - x1) * (y2 - y1)
        x1, y1, x2, y2 = feature.rect2
        s2 = ii[idx, y2, x2] - ii[idx, y1, x2] - ii[idx, y2, x1] + ii[idx, y1, x1]
        a2 = (x2 - x1) * (y2 - y1)
        # Strict mean comparison via cross multiplication: exact, so ties
        # respond 0 and positive affine intensity maps cannot flip it.
        return s1 * a2 < s2 * a1


def stack_integral_images(patches: np.ndarray) -> np.ndarray:
    """Integral images for an (n, w, w) stack of patches."""
    p = np.asarray(patches)
    dtype = np.float64 if np.issubdtype(p.dtype, np.floating) else np.int64
    n, h, w = p.shape
    ii = np.zeros((n, h + 1, w + 1), dtype=dtype)
    np.cumsum(np.cumsum(p, axis=1, dtype=dtype), axis=2, out=ii[:, 1:, 1:])
    return ii


def eval_feature(feature: RelationalFeature, patch) -> int:
    """Evaluate one feature on one patch: 1 iff mean(rect1) < mean(rect2)."""
    w = patch.window
    for rect in (feature.rect1, feature.rect2):
        if rect[2] > w or rect[3] > w:
            raise ValueError(f"rectangle {rect} exceeds window {w}")
    ii = integral_image(patch.pixels)[np.newaxis]
    resp = _StackSource(ii).responses(feature, np.array([0]))
    return int(resp[0])


@dataclass
class TreeNode:
    """Internal nodes hold a feature; leaves hold raw class counts.

    left is followed when the feature responds 0, right when it responds 1.
    """

    feature: RelationalFeature | None = None
    left: TreeNode | None = None
    right: TreeNode | None = None
    counts: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.counts is not None


def _leaf_posterior(counts):
    # Laplace smoothing (add one per class) keeps every leaf away from hard
    # 0/1 probabilities, which the weighted online updates rely on.
    c = counts + 1.0
    return c / c.sum()


def _gini(counts):
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - float((p * p).sum())


@dataclass
class ForestConfig:
    n_trees: int = 32
    max_depth: int = 12
    n_features_per_node: int = 20
    window: int = 65
    background_ratio: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.n_features_per_node < 1:
            raise ValueError("forest parameters must be positive")
        if self.window % 2 != 1:
            raise ValueError("window must be odd")


def _grow(ii_stack, y, idx, depth, cfg, rng, n_classes):
    counts = np.bincount(y[idx], minlength=n_classes)
    if depth >= cfg.max_depth or len(idx) < 2 or np.count_nonzero(counts) <= 1:
        return TreeNode(counts=counts)

    source = _StackSource(ii_stack)
    features = [sample_feature(rng, cfg.window) for _ in range(cfg.n_features_per_node)]
    resp = np.stack([source.responses(f, idx) for f in features], axis=1)

    parent_gini = _gini(counts)
    n = len(idx)
    best = None
    best_gain = 0.0
    for j in range(resp.shape[1]):
        mask = resp[:, j]
        n_right = int(mask.sum())
        if n_right == 0 or n_right == n:
            continue
        right_counts = np.bincount(y[idx[mask]], minlength=n_classes)
        left_counts = counts - right_counts
        gain = parent_gini - (
            (n - n_right) / n * _gini(left_counts) + n_right / n * _gini(right_counts)
        )
        if gain > best_gain:
            best_gain = gain
            best = j
    if best is None:
        return TreeNode(counts=counts)

    mask = resp[:, best]
    return TreeNode(
        feature=features[best],
        left=_grow(ii_stack, y, idx[~mask], depth + 1, cfg, rng, n_classes),
        right=_grow(ii_stack, y, idx[mask], depth + 1, cfg, rng, n_classes),
    )


def train_tree(patches: np.ndarray, labels: np.ndarray, cfg: ForestConfig,
               rng, n_classes: int = 2) -> TreeNode:
    """Grow one randomized tree on (n, w, w) patches with integer labels.

    Splits greedily maximize Gini impurity decrease over
    cfg.n_features_per_node random candidate features. Growth stops at
    cfg.max_depth, at pure nodes, below 2 samples, or when no candidate
    separates the node.
    """
    patches = np.asarray(patches)
    labels = np.asarray(labels)
    if len(patches) == 0:
        raise ValueError("empty training set")
    if patches.shape[1] != cfg.window or patches.shape[2] != cfg.window:
        raise ValueError("patch size does not match cfg.window")
    ii = stack_integral_images(patches)
    return _grow(ii, labels, np.arange(len(labels)), 0, cfg, rng, n_classes)


@dataclass
class DetectionForest:
    """Weighted ensemble of relational-feature trees."""

    trees: list[TreeNode]
    weights: np.ndarray
    window: int
    classes: tuple[str, ...] = DEFAULT_CLASSES
    config: ForestConfig | None = None
    rng_seed: int | None = None
    # Per-tree out-of-bag index sets, kept in memory for model selection;
    # they are not part of the serialized form.
    oob_indices: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.trees):
            raise ValueError("one weight per tree required")
        if len(self.trees) and np.any(self.weights <= 0):
            raise ValueError("tree weights must be positive")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def snapshot(self) -> "DetectionForest":
        """Copy-on-update view: shares immutable trees, copies the rest."""
        return DetectionForest(
            trees=list(self.trees),
            weights=self.weights.copy(),
            window=self.window,
            classes=self.classes,
            config=self.config,
            rng_seed=self.rng_seed,
        )


def _accumulate_tree(node, source, idx, weight, out):
    if len(idx) == 0:
        return
    if node.is_leaf:
        out[idx] += weight * _leaf_posterior(node.counts)
        return
    resp = source.responses(node.feature, idx)
    _accumulate_tree(node.left, source, idx[~resp], weight, out)
    _accumulate_tree(node.right, source, idx[resp], weight, out)


def forest_posteriors(forest: DetectionForest, source, n: int) -> np.ndarray:
    """Weighted class posterior for n samples exposed by a response source."""
    out = np.zeros((n, len(forest.classes)))
    idx = np.arange(n)
    for tree, w in zip(forest.trees, forest.weights):
        _accumulate_tree(tree, source, idx, w, out)
    out /= forest.weights.sum()
    return out


def _tree_vote(tree, source, idx, n, n_classes):
    post = np.zeros((n, n_classes))
    _accumulate_tree(tree, source, idx, 1.0, post)
    return np.argmax(post, axis=1)


def predict(forest: DetectionForest, patch) -> np.ndarray:
    """Class probability vector for a single patch, ordered like
    forest.classes."""
    if patch.window != forest.window:
        raise ValueError(
            f"patch window {patch.window} does not match forest window {forest.window}"
        )
    ii = integral_image(patch.pixels)[np.newaxis]
    return forest_posteriors(forest, _StackSource(ii), 1)[0]


def predict_batch(forest: DetectionForest, patches: np.ndarray) -> np.ndarray:
    """Class probabilities for an (n, w, w) stack of patches."""
    patches = np.asarray(patches)
    if patches.shape[1] != forest.window:
        raise ValueError("patch size does not match forest window")
    ii = stack_integral_images(patches)
    return forest_posteriors(forest, _StackSource(ii), len(patches))


def train_forest(patches: np.ndarray, labels: np.ndarray, cfg: ForestConfig,
                 classes: tuple[str, ...] = DEFAULT_CLASSES,
                 n_jobs: int = 1) -> DetectionForest:
    """Train a forest on labelled patches.

    Class 1 samples ("nucleus") are bootstrapped per tree; class 0
    ("background") is randomly subsampled per tree at
    cfg.background_ratio times the positive count, which keeps individual
    trees balanced even when background dominates the pool. Per-tree seeds
    are spawned from cfg.rng_seed, so results do not depend on training
    order and parallel training equals sequential.
    """
    patches = np.asarray(patches)
    labels = np.asarray(labels)
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise ValueError("training set must contain both classes")
    if patches.shape[1] != cfg.window or patches.shape[2] != cfg.window:
        raise ValueError("patch size does not match cfg.window")

    ii = stack_integral_images(patches)
    children = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_trees)
    all_idx = np.arange(len(labels))

    def build(child_seq):
        rng = np.random.default_rng(child_seq)
        boot = rng.choice(pos_idx, size=len(pos_idx), replace=True)
        n_bg = min(max(int(round(cfg.background_ratio * len(pos_idx))), 1), len(neg_idx))
        bg = rng.choice(neg_idx, size=n_bg, replace=False)
        bag = np.concatenate([boot, bg])
        tree = _grow(ii, labels, bag, 0, cfg, rng, len(classes))
        return tree, bag

    if n_jobs == 1:
        built = [build(c) for c in children]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            built = list(pool.map(build, children))

    trees = [t for t, _ in built]
    oob_sets = [np.setdiff1d(all_idx, np.unique(bag)) for _, bag in built]
    return DetectionForest(
        trees=trees,
        weights=np.ones(len(trees)),
        window=cfg.window,
        classes=classes,
        config=cfg,
        rng_seed=cfg.rng_seed,
        oob_indices=oob_sets,
    )


def oob_error(forest: DetectionForest, patches: np.ndarray,
              labels: np.ndarray) -> float:
    """Out-of-bag misclassification rate on the forest's training set.

    Each sample is classified by majority vote of the trees whose bag did
    not contain it; samples seen by every tree are excluded.
    """
    if forest.oob_indices is None:
        raise ValueError("forest carries no out-of-bag records")
    labels = np.asarray(labels)
    n = len(labels)
    n_classes = len(forest.classes)
    ii = stack_integral_images(np.asarray(patches))
    source = _StackSource(ii)
    votes = np.zeros((n, n_classes), dtype=np.int64)
    for tree, oob in zip(forest.trees, forest.oob_indices):
        if len(oob) == 0:
            continue
        votes[oob, _tree_vote(tree, source, oob, n, n_classes)[oob]] += 1
    covered = votes.sum(axis=1) > 0
    if not covered.any():
        raise ValueError("no out-of-bag sample exists")
    pred = np.argmax(votes[covered], axis=1)
    return float(np.mean(pred != labels[covered]))


def grid_search_oob(patches, labels, grid):
    """Train one forest per config and keep the lowest out-of-bag error.

    Ties prefer fewer trees, then smaller depth, then fewer candidate
    features per node. Returns (best_forest, results) where results is a
    list of (config, oob_error) in grid order.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty parameter grid")
    results = []
    best = None
    for cfg in grid:
        forest = train_forest(patches, labels, cfg)
        err = oob_error(forest, patches, labels)
        results.append((cfg, err))
        key = (err, cfg.n_trees, cfg.max_depth, cfg.n_features_per_node)
        if best is None or key < best[0]:
            best = (key, forest)
    return best[1], results


def _node_to_dict(node):
    if node.is_leaf:
        return {"counts": [int(c) for c in node.counts]}
    return {
        "rect1": list(node.feature.rect1),
        "rect2": list(node.feature.rect2),
        "false": _node_to_dict(node.left),
        "true": _node_to_dict(node.right),
    }


def _node_from_dict(d, n_classes):
    if "counts" in d:
        counts = np.array(d["counts"], dtype=np.int64)
        if len(counts) != n_classes:
            raise ValueError("leaf count length does not match class list")
        return TreeNode(counts=counts)
    return TreeNode(
        feature=RelationalFeature(tuple(d["rect1"]), tuple(d["rect2"])),
        left=_node_from_dict(d["false"], n_classes),
        right=_node_from_dict(d["true"], n_classes),
    )


def forest_to_json(forest: DetectionForest) -> str:
    """Serialize a forest to a versioned JSON string."""
    cfg = forest.config
    doc = {
        "format_version": FOREST_FORMAT_VERSION,
        "classes": list(forest.classes),
        "window": forest.window,
        "rng_seed": forest.rng_seed,
        "weights": [float(w) for w in forest.weights],
        "config": None
        if cfg is None
        else {
            "n_trees": cfg.n_trees,
            "max_depth": cfg.max_depth,
            "n_features_per_node": cfg.n_features_per_node,
            "window": cfg.window,
            "background_ratio": cfg.background_ratio,
            "rng_seed": cfg.rng_seed,
        },
        "trees": [_node_to_dict(t) for t in forest.trees],
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def forest_from_json(text: str) -> DetectionForest:
    doc = json.loads(text)
    version = doc.get("format_version")
    if version != FOREST_FORMAT_VERSION:
        raise ValueError(f"unsupported forest format version {version!r}")
    classes = tuple(doc["classes"])
    cfg = doc.get("config")
    return DetectionForest(
        trees=[_node_from_dict(t, len(classes)) for t in doc["trees"]],
        weights=np.array(doc["weights"], dtype=np.float64),
        window=int(doc["window"]),
        classes=classes,
        config=None if cfg is None else ForestConfig(**cfg),
        rng_seed=doc.get("rng_seed"),
    )


def save_forest(forest: DetectionForest, path) -> None:
    with open(path, "w") as fh:
        fh.write(forest_to_json(forest))
        fh.write("\n")


def load_forest(path) -> DetectionForest:
    with open(path) as fh:
        return forest_from_json(fh.read())
