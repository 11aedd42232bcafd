"""Nucleus detection: background sampling, dense classification, mode finding.

The detector slides the forest over the image on a stride grid, turns the
positive-class posterior into a probability map, and condenses the map
into point detections with a weighted mean-shift procedure using a
circular box kernel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial import QhullError, Voronoi

from .forest import DetectionForest, forest_posteriors
from .images import GrayImage, mirror_pad


def voronoi_negative_samples(positives: np.ndarray, bounds: tuple[int, int],
                             min_distance: float) -> np.ndarray:
    """Background sample positions from the tessellation of the positives.

    The vertices of the Voronoi diagram of the positive positions are by
    construction locally farthest from the marked nuclei, which makes them
    cheap, plausible background samples. Vertices outside the image are
    discarded, duplicates removed, and any vertex within min_distance of a
    positive is dropped.

    positives: (n, 2) array of (x, y); bounds: (width, height).
    Returns an (m, 2) integer array of pixel positions.
    """
    pts = np.asarray(positives, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("degenerate tessellation: need at least 3 positive positions")
    try:
        vor = Voronoi(pts)
    except QhullError:
        raise ValueError("degenerate tessellation: positive positions are collinear") from None
    verts = vor.vertices
    w, h = bounds
    inside = (verts[:, 0] >= 0) & (verts[:, 0] <= w - 1) & \
             (verts[:, 1] >= 0) & (verts[:, 1] <= h - 1)
    verts = np.round(verts[inside]).astype(np.int64)
    verts = np.clip(verts, 0, [w - 1, h - 1])
    if len(verts) == 0:
        return verts.reshape(0, 2)
    verts = np.unique(verts, axis=0)
    d2 = ((verts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    keep = d2.min(axis=1) > min_distance ** 2
    return verts[keep]


@dataclass(frozen=True)
class ProbabilityMap:
    """Dense per-pixel positive-class probability, values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError("probability map must be a non-empty 2-D array")
        if v.min() < 0 or v.max() > 1:
            raise ValueError("probability map values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class _GridSource:
    """Feature responses for sliding-window positions on one global
    integral image. Rectangle sums cost four lookups per position."""

    def __init__(self, ii, cx, cy):
        self.ii = ii
        self.cx = cx
        self.cy = cy

    def responses(self, feature, idx):
        ii = self.ii
        cx = self.cx[idx]
        cy = self.cy[idx]
        x1, y1, x2, y2 = feature.rect1
        s1 = ii[cy + y2, cx + x2] - ii[cy + y1, cx + x2] \
            - ii[cy + y2, cx + x1] + ii[cy + y1, cx + x1]
        a1 = (x2 - x1) * (y2 - y1)
        x1, y1, x2, y2 = feature.rect2
        s2 = ii[cy + y2, cx + x2] - ii[cy + y1, cx + x2] \
            - ii[cy + y2, cx + x1] + ii[cy + y1, cx + x1]
        a2 = (x2 - x1) * (y2 - y1)
        return s1 * a2 < s2 * a1


def probability_map(forest: DetectionForest, img: GrayImage,
                    stride: int = 2) -> ProbabilityMap:
    """Positive-class posterior at every stride-th pixel.

    Pixels between grid positions take the value of their nearest
    evaluated neighbour; border windows mirror the image content, matching
    single-patch extraction exactly.
    """
    if stride < 1:
        raise ValueError("stride must be at least 1")
    h, w = img.pixels.shape
    r = forest.window // 2
    padded = mirror_pad(img, r)
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(padded, axis=0, dtype=np.int64), axis=1, out=ii[1:, 1:])

    xs = np.arange(0, w, stride)
    ys = np.arange(0, h, stride)
    # Patch top-left for center (x, y) lands at padded[y, x]; grid arrays
    # therefore hold original-frame centers directly.
    cx = np.tile(xs, len(ys))
    cy = np.repeat(ys, len(xs))
    post = forest_posteriors(forest, _GridSource(ii, cx, cy), len(cx))
    grid = post[:, 1].reshape(len(ys), len(xs))

    # Nearest-evaluated fill; ties round up to the higher grid index.
    col = np.minimum((np.arange(w) + stride // 2) // stride, len(xs) - 1)
    row = np.minimum((np.arange(h) + stride // 2) // stride, len(ys) - 1)
    return ProbabilityMap(grid[np.ix_(row, col)])


@dataclass
class MeanShiftConfig:
    """Mode finding parameters; radius should match the expected nucleus
    radius in pixels."""

    radius: float
    convergence_eps: float = 0.5
    max_iters: int = 100
    merge_dist: float | None = None
    min_mass: float | None = None

    def __post_init__(self):
        if not (self.radius > 0):
            raise ValueError("kernel radius must be positive")

    def resolved_merge_dist(self) -> float:
        return self.radius / 2.0 if self.merge_dist is None else self.merge_dist

    def resolved_min_mass(self) -> float:
        if self.min_mass is not None:
            return self.min_mass
        return 0.3 * disc_pixel_count(self.radius)


def disc_pixel_count(radius: float) -> int:
    """Number of integer pixels within Euclidean distance radius of a
    pixel center."""
    r = int(math.ceil(radius))
    ox, oy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    return int(((ox ** 2 + oy ** 2) <= radius ** 2).sum())


@dataclass(frozen=True)
class Detection:
    """A detected nucleus center with its kernel mass as score."""

    x: float
    y: float
    score: float


def _disc_footprint(radius):
    r = int(math.ceil(radius))
    ox, oy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    return (ox ** 2 + oy ** 2) <= radius ** 2


def local_maxima(values: np.ndarray, radius: float) -> np.ndarray:
    """(n, 2) array of (x, y) pixels that dominate their disc
    neighbourhood and are positive."""
    foot = _disc_footprint(radius)
    peak = ndimage.maximum_filter(values, footprint=foot, mode="constant", cval=0.0)
    ys, xs = np.nonzero((values >= peak) & (values > 0))
    return np.column_stack([xs, ys])


def _shift_step(values, x, y, radius):
    """One mean-shift update, computed relative to the nearest pixel so the
    arithmetic is identical under integer translation of the map."""
    h, w = values.shape
    bx = int(round(x))
    by = int(round(y))
    fx = x - bx
    fy = y - by
    r = int(math.ceil(radius)) + 1
    ox = np.arange(-r, r + 1)
    gx, gy = np.meshgrid(ox, ox)
    mask = (gx - fx) ** 2 + (gy - fy) ** 2 <= radius ** 2
    px = bx + gx
    py = by + gy
    mask &= (px >= 0) & (px < w) & (py >= 0) & (py < h)
    if not mask.any():
        return 0.0, 0.0, 0.0
    wgt = values[py[mask], px[mask]]
    total = wgt.sum()
    if total <= 0:
        return 0.0, 0.0, 0.0
    sx = (wgt * (gx[mask] - fx)).sum() / total
    sy = (wgt * (gy[mask] - fy)).sum() / total
    return sx, sy, total


def mean_shift_modes(pmap: ProbabilityMap, cfg: MeanShiftConfig) -> list[Detection]:
    """Condense a probability map into weighted modes.

    Every local maximum seeds an iteration y <- sum(w p)/sum(w) over the
    disc of cfg.radius around y. Converged points are merged within
    merge_dist keeping the highest kernel mass, and modes below min_mass
    are dropped.
    """
    values = pmap.values
    eps = cfg.convergence_eps
    candidates = []
    for x0, y0 in local_maxima(values, cfg.radius):
        x, y = float(x0), float(y0)
        mass = 0.0
        for _ in range(cfg.max_iters):
            sx, sy, mass = _shift_step(values, x, y, cfg.radius)
            x += sx
            y += sy
            if sx * sx + sy * sy < eps * eps:
                break
        if mass > 0:
            candidates.append((x, y, mass))
    return merge_modes(candidates, cfg)


def merge_modes(candidates, cfg: MeanShiftConfig) -> list[Detection]:
    """Greedy highest-mass-first merging followed by the min_mass cut."""
    merge_dist = cfg.resolved_merge_dist()
    min_mass = cfg.resolved_min_mass()
    order = sorted(candidates, key=lambda c: (-c[2], c[1], c[0]))
    kept: list[tuple] = []
    for x, y, mass in order:
        if all((x - kx) ** 2 + (y - ky) ** 2 > merge_dist ** 2 for kx, ky, _ in kept):
            kept.append((x, y, mass))
    return [Detection(x, y, mass) for x, y, mass in kept if mass >= min_mass]


def detect_nuclei(forest: DetectionForest, img: GrayImage, cfg: MeanShiftConfig,
                  stride: int = 2) -> list[Detection]:
    """Full detection pass: probability map, then mean-shift modes."""
    return mean_shift_modes(probability_map(forest, img, stride), cfg)


@dataclass
class MatchResult:
    precision: float
    recall: float
    f1: float
    matches: list[tuple[int, int]]
    unmatched_detected: list[int]
    unmatched_truth: list[int]


def match_detections(detected, truth, match_radius: float) -> MatchResult:
    """Greedy one-to-one matching by ascending pair distance.

    detected and truth are sequences of objects with x and y attributes or
    (x, y) pairs. A pair matches when its distance is at most match_radius.
    """

    def xy(p):
        return (p.x, p.y) if hasattr(p, "x") else (p[0], p[1])

    det = [xy(p) for p in detected]
    tru = [xy(p) for p in truth]
    pairs = []
    for i, (dx, dy) in enumerate(det):
        for j, (tx, ty) in enumerate(tru):
            d2 = (dx - tx) ** 2 + (dy - ty) ** 2
            if d2 <= match_radius ** 2:
                pairs.append((d2, i, j))
    pairs.sort()
    used_d: set[int] = set()
    used_t: set[int] = set()
    matches = []
    for _, i, j in pairs:
        if i not in used_d and j not in used_t:
            matches.append((i, j))
            used_d.add(i)
            used_t.add(j)
    tp = len(matches)
    precision = tp / len(det) if det else (1.0 if not tru else 0.0)
    recall = tp / len(tru) if tru else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MatchResult(
        precision=precision,
        recall=recall,
        f1=f1,
        matches=matches,
        unmatched_detected=sorted(set(range(len(det))) - used_d),
        unmatched_truth=sorted(set(range(len(tru))) - used_t),
    )


def save_detections_csv(detections, spot_id: str, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["spot_id", "x", "y", "score"])
        for d in detections:
            writer.writerow([spot_id, repr(float(d.x)), repr(float(d.y)),
                             repr(float(d.score))])


def load_detections_csv(path) -> list[tuple[str, Detection]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["spot_id", "x", "y", "score"]:
            raise ValueError(f"{path}: unexpected detections header {header}")
        for row in reader:
            out.append((row[0], Detection(float(row[1]), float(row[2]), float(row[3]))))
    return out


def detections_to_json(detections, spot_id: str) -> dict:
    return {
        "spot_id": spot_id,
        "detections": [
            {"x": float(d.x), "y": float(d.y), "score": float(d.score)}
            for d in detections
        ],
    }


def save_detections_json(detections, spot_id: str, path) -> None:
    with open(path, "w") as fh:
        json.dump(detections_to_json(detections, spot_id), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_probability_map_png(pmap: ProbabilityMap, path) -> None:
    """Write the map as a 16-bit grayscale PNG, value = round(p * 65535)."""
    arr = np.round(pmap.values * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def load_probability_map_png(path) -> ProbabilityMap:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return ProbabilityMap(arr / 65535.0)
