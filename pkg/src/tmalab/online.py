"""Interactive refinement of a trained forest from expert corrections.

Each correction reweights the trees that voted against the expert on that
sample; every few corrections the forest also grows fresh trees trained
on the corrected samples plus a bootstrap of the original data. All
updates are deterministic given the session seed, so an append-only log
of corrections replays to a bit-identical forest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .forest import (
    DetectionForest,
    ForestConfig,
    _StackSource,
    _accumulate_tree,
    forest_posteriors,
    integral_image,
    train_tree,
)
from .images import extract_patch


@dataclass
class OnlineParams:
    """Update rule constants.

    beta multiplies the weight of each tree whose individual vote
    disagreed with the expert; w_min floors the weights so no tree is
    silenced forever. Every buffer_batch corrections, k_new trees are
    grown. beta = 1 with k_new = 0 freezes the forest.
    """

    beta: float = 0.5
    k_new: int = 2
    buffer_batch: int = 10
    w_min: float = 1e-3

    def __post_init__(self):
        if not (0 < self.beta <= 1):
            raise ValueError("beta must be in (0, 1]")
        if not (0 < self.w_min <= 1):
            raise ValueError("w_min must be in (0, 1]")
        if self.k_new < 0 or self.buffer_batch < 1:
            raise ValueError("k_new must be >= 0 and buffer_batch >= 1")


@dataclass
class Correction:
    """An expert's asserted label for one sample position.

    predicted_label records what the forest said at the moment the
    correction was applied; a correction may also confirm the prediction.
    """

    spot_id: str
    x: int
    y: int
    asserted_label: str
    expert_id: str
    timestamp: str | None = None
    predicted_label: str | None = None


def _tree_margins(forest, source):
    """Per-tree posterior margins on a single sample, for every class."""
    n_classes = len(forest.classes)
    post = np.zeros((forest.n_trees, n_classes))
    for i, tree in enumerate(forest.trees):
        one = np.zeros((1, n_classes))
        _accumulate_tree(tree, source, np.arange(1), 1.0, one)
        post[i] = one[0]
    return post


def _margin_of(weights, tree_margin):
    return float(np.dot(weights, tree_margin) / weights.sum())


class OnlineSession:
    """Single-writer state for one interactive annotation session."""

    def __init__(self, forest: DetectionForest, train_patches, train_labels,
                 images: dict, params: OnlineParams | None = None, seed: int = 0):
        self.forest = forest.snapshot()
        self.params = params or OnlineParams()
        self.seed = seed
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.images = dict(images)
        self.train_patches = np.asarray(train_patches)
        self.train_labels = np.asarray(train_labels)
        self.buffer: list[Correction] = []
        self._buffer_patches: list[np.ndarray] = []
        self._version = 0

    @property
    def version(self) -> int:
        """Increments on every state change; lets readers cache."""
        return self._version

    def forest_snapshot(self) -> DetectionForest:
        return self.forest.snapshot()

    def _patch_pixels(self, spot_id, x, y):
        if spot_id not in self.images:
            raise ValueError(f"unknown spot {spot_id!r}")
        img = self.images[spot_id]
        return extract_patch(img, (int(x), int(y)), self.forest.window).pixels

    def predict_at(self, spot_id, x, y) -> np.ndarray:
        """Current forest posterior at an image position."""
        pixels = self._patch_pixels(spot_id, x, y)
        ii = integral_image(pixels)[np.newaxis]
        return forest_posteriors(self.forest, _StackSource(ii), 1)[0]

    def margin_at(self, spot_id, x, y, label: str) -> float:
        post = self.predict_at(spot_id, x, y)
        idx = self.forest.classes.index(label)
        others = np.delete(post, idx)
        return float(post[idx] - others.max())

    def apply_correction(self, c: Correction) -> tuple[float, float]:
        """Apply one correction; returns the sample's vote margin for the
        asserted label before and after the weight update.

        The margin after the weight update never falls below the margin
        before it. When the buffer reaches a multiple of buffer_batch the
        call then also grows k_new trees, which may move the prediction
        further in either direction.
        """
        if c.asserted_label not in self.forest.classes:
            raise ValueError(f"unknown label {c.asserted_label!r}")
        pixels = self._patch_pixels(c.spot_id, c.x, c.y)
        ii = integral_image(pixels)[np.newaxis]
        source = _StackSource(ii)

        idx = self.forest.classes.index(c.asserted_label)
        post = _tree_margins(self.forest, source)
        votes = np.argmax(post, axis=1)
        margins = post[:, idx] - np.max(
            np.delete(post, idx, axis=1), axis=1
        )
        w = self.forest.weights
        margin_before = _margin_of(w, margins)
        c.predicted_label = self.forest.classes[
            int(np.argmax(w @ post))
        ]

        wrong = np.flatnonzero(votes != idx)
        new_w = w
        if len(wrong):
            p = self.params
            cand = w.copy()
            cand[wrong] = np.maximum(cand[wrong] * p.beta, p.w_min)
            if _margin_of(cand, margins) >= margin_before:
                new_w = cand
            else:
                # The floor clamped some wrong trees harder than others,
                # which can tip the weighted margin the wrong way. A
                # uniform factor that respects the floor cannot.
                f = max(p.beta, float((p.w_min / w[wrong]).max()))
                if f < 1.0:
                    cand = w.copy()
                    cand[wrong] *= f
                    if _margin_of(cand, margins) >= margin_before:
                        new_w = cand
        self.forest.weights = new_w
        margin_after = _margin_of(new_w, margins)

        self.buffer.append(c)
        self._buffer_patches.append(pixels)
        if self.params.k_new > 0 and len(self.buffer) % self.params.buffer_batch == 0:
            self._grow_trees()
        self._version += 1
        return margin_before, margin_after

    def _grow_trees(self):
        """Train k_new trees on the corrected samples plus a bootstrap of
        the original data; they join with the median of current weights."""
        cfg = self.forest.config or ForestConfig(window=self.forest.window)
        n = len(self.train_labels)
        median_w = float(np.median(self.forest.weights))
        buf_X = np.stack(self._buffer_patches)
        buf_y = np.array(
            [self.forest.classes.index(c.asserted_label) for c in self.buffer],
            dtype=np.int64,
        )
        for _ in range(self.params.k_new):
            boot = self.rng.integers(0, n, size=n)
            X = np.concatenate([self.train_patches[boot], buf_X])
            y = np.concatenate([self.train_labels[boot], buf_y])
            tree = train_tree(X, y, cfg, self.rng, n_classes=len(self.forest.classes))
            self.forest.trees.append(tree)
            self.forest.weights = np.append(self.forest.weights, median_w)
        # out-of-bag bookkeeping from batch training no longer applies
        self.forest.oob_indices = None

    def session_loop(self, events) -> DetectionForest:
        """Drive the session from an event stream.

        Events are tuples: ("correct", Correction) applies a correction,
        ("classify", spot_id) requests predictions without changing state,
        ("stop",) ends the loop. Returns the final forest.
        """
        for event in events:
            kind = event[0]
            if kind == "correct":
                self.apply_correction(event[1])
            elif kind == "classify":
                pass  # predictions are served on demand; no state change
            elif kind == "stop":
                break
            else:
                raise ValueError(f"unknown session event {kind!r}")
        return self.forest


def correction_to_json(c: Correction) -> dict:
    return asdict(c)


def correction_from_json(doc: dict) -> Correction:
    return Correction(
        spot_id=doc["spot_id"],
        x=int(doc["x"]),
        y=int(doc["y"]),
        asserted_label=doc["asserted_label"],
        expert_id=doc["expert_id"],
        timestamp=doc.get("timestamp"),
        predicted_label=doc.get("predicted_label"),
    )


def append_correction_log(path, c: Correction) -> None:
    """Append one correction to a JSON-lines log and flush it."""
    with open(path, "a") as fh:
        fh.write(json.dumps(correction_to_json(c), sort_keys=True))
        fh.write("\n")
        fh.flush()


def read_correction_log(path) -> list[Correction]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(correction_from_json(json.loads(line)))
    return out


def replay_corrections(session: OnlineSession, corrections) -> DetectionForest:
    """Apply logged corrections in order; with the same starting forest,
    parameters and seed this reproduces the original final forest."""
    for c in corrections:
        session.apply_correction(
            Correction(
                spot_id=c.spot_id,
                x=c.x,
                y=c.y,
                asserted_label=c.asserted_label,
                expert_id=c.expert_id,
                timestamp=c.timestamp,
            )
        )
    return session.forest
