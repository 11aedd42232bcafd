"""Staining state estimation from color distributions around nuclei.

Each detected nucleus is summarized by a normalized 3-D RGB histogram of
the pixels within a fixed radius of its center. A model is just the two
class centroids (stained / unstained) of such histograms; classification
assigns the nearer centroid under L1 distance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .images import RgbImage

STAINED = "stained"
UNSTAINED = "unstained"


@dataclass(frozen=True)
class ColorHistogram:
    """Normalized RGB histogram with b bins per channel, flattened."""

    counts: np.ndarray
    bins_per_channel: int

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.float64)
        b = self.bins_per_channel
        if c.shape != (b ** 3,):
            raise ValueError(f"histogram must have {b}**3 entries")
        if c.min() < 0 or not np.isclose(c.sum(), 1.0, atol=1e-9):
            raise ValueError("histogram must be non-negative and sum to 1")
        object.__setattr__(self, "counts", c)


def histogram_at(img: RgbImage, center: tuple[float, float], radius: float,
                 bins_per_channel: int = 8) -> ColorHistogram:
    """Histogram of the pixels within `radius` of center, normalized to
    unit mass. The disc is clipped at the image border; a disc entirely
    outside the image is an error.

    A radius below one pixel degenerates to the single center pixel.
    """
    if bins_per_channel < 1 or bins_per_channel > 256:
        raise ValueError("bins_per_channel must be in [1, 256]")
    h, w = img.pixels.shape[:2]
    x, y = center
    r = int(np.ceil(radius))
    xs = np.arange(int(np.floor(x)) - r, int(np.floor(x)) + r + 2)
    ys = np.arange(int(np.floor(y)) - r, int(np.floor(y)) + r + 2)
    gx, gy = np.meshgrid(xs, ys)
    mask = (gx - x) ** 2 + (gy - y) ** 2 <= radius ** 2
    mask &= (gx >= 0) & (gx < w) & (gy >= 0) & (gy < h)
    if not mask.any():
        raise ValueError(f"disc at {center} lies entirely outside the {w}x{h} image")
    px = img.pixels[gy[mask], gx[mask]].astype(np.int64)
    b = bins_per_channel
    binned = (px * b) // 256  # 256 intensity values spread over b bins
    flat = (binned[:, 0] * b + binned[:, 1]) * b + binned[:, 2]
    counts = np.bincount(flat, minlength=b ** 3).astype(np.float64)
    return ColorHistogram(counts / counts.sum(), b)


@dataclass
class StainingModel:
    """Class centroids of nucleus color histograms."""

    stained_centroid: np.ndarray
    unstained_centroid: np.ndarray
    bins_per_channel: int
    radius: float

    def __post_init__(self):
        s = np.asarray(self.stained_centroid, dtype=np.float64)
        u = np.asarray(self.unstained_centroid, dtype=np.float64)
        if s.shape != u.shape or s.shape != (self.bins_per_channel ** 3,):
            raise ValueError("centroid shapes do not match bins_per_channel")
        self.stained_centroid = s
        self.unstained_centroid = u


def fit_staining_model(stained: list[ColorHistogram],
                       unstained: list[ColorHistogram],
                       radius: float) -> StainingModel:
    """Centroid per class as the mean of the member histograms."""
    if not stained or not unstained:
        raise ValueError("both classes need at least one example histogram")
    b = stained[0].bins_per_channel
    for hgram in (*stained, *unstained):
        if hgram.bins_per_channel != b:
            raise ValueError("histograms mix different bin counts")
    sc = np.mean([h.counts for h in stained], axis=0)
    uc = np.mean([h.counts for h in unstained], axis=0)
    return StainingModel(sc / sc.sum(), uc / uc.sum(), b, radius)


def classify_staining(model: StainingModel, hgram: ColorHistogram) -> str:
    """Nearer centroid under L1 distance; exact ties count as unstained."""
    if hgram.bins_per_channel != model.bins_per_channel:
        raise ValueError("histogram bin count does not match model")
    ds = np.abs(hgram.counts - model.stained_centroid).sum()
    du = np.abs(hgram.counts - model.unstained_centroid).sum()
    return STAINED if ds < du else UNSTAINED


@dataclass
class PatientStaining:
    """Per-patient staining summary over all detected nuclei."""

    patient_id: str
    n_detected: int
    n_stained: int
    percentage: float
    flags: list[str] = field(default_factory=list)


def patient_staining(patient_id: str, img: RgbImage, detections,
                     model: StainingModel) -> PatientStaining:
    """Classify every detection and report the stained percentage.

    With zero detections the percentage is 0 and the result is flagged
    rather than failing on the division.
    """
    spots = [(img, detections)]
    return patient_staining_multi(patient_id, spots, model)


def patient_staining_multi(patient_id: str, spots, model: StainingModel) -> PatientStaining:
    """Staining summary across several (image, detections) pairs of the
    same patient."""
    n_detected = 0
    n_stained = 0
    for img, detections in spots:
        for det in detections:
            hgram = histogram_at(img, (det.x, det.y), model.radius,
                                 model.bins_per_channel)
            n_detected += 1
            if classify_staining(model, hgram) == STAINED:
                n_stained += 1
    if n_detected == 0:
        return PatientStaining(patient_id, 0, 0, 0.0, flags=["no nuclei detected"])
    return PatientStaining(patient_id, n_detected, n_stained,
                           100.0 * n_stained / n_detected)


def save_staining_csv(rows: list[PatientStaining], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "n_detected", "n_stained", "percentage", "flags"])
        for r in rows:
            writer.writerow([r.patient_id, r.n_detected, r.n_stained,
                             repr(float(r.percentage)), ";".join(r.flags)])


def load_staining_csv(path) -> list[PatientStaining]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["patient_id", "n_detected", "n_stained", "percentage", "flags"]:
            raise ValueError(f"{path}: unexpected staining header {header}")
        for row in reader:
            out.append(PatientStaining(
                patient_id=row[0],
                n_detected=int(row[1]),
                n_stained=int(row[2]),
                percentage=float(row[3]),
                flags=[f for f in row[4].split(";") if f],
            ))
    return out
