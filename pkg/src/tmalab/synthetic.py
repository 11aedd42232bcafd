"""Synthetic image and study generators for benchmarks and end-to-end tests.

Images contain dark discs on a brighter textured background, placed with
a minimum pairwise distance (dart-throwing Poisson-disc sampling) so
detections are unambiguous. Study generation plants a configurable link
between staining and survival.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    NucleusAnnotation,
    SpotRecord,
    SurvivalRecord,
    save_annotations,
    save_survival_csv,
)
from .images import GrayImage, RgbImage, save_image

BACKGROUND_RGB = (228, 212, 218)   # pale eosin-like background
UNSTAINED_RGB = (72, 84, 158)      # bluish counterstained nucleus
STAINED_RGB = (132, 92, 52)        # brown positively stained nucleus


def poisson_disc_centers(rng, size: int, n: int, min_dist: float,
                         margin: float, max_attempts: int = 20000) -> np.ndarray:
    """n points in [margin, size - margin)^2 with pairwise distance at
    least min_dist, by rejection sampling."""
    lo, hi = margin, size - margin
    if hi <= lo:
        raise ValueError("margin too large for image size")
    placed: list[np.ndarray] = []
    for _ in range(max_attempts):
        cand = rng.uniform(lo, hi, size=2)
        if all(((cand - p) ** 2).sum() >= min_dist ** 2 for p in placed):
            placed.append(cand)
            if len(placed) == n:
                return np.array(placed)
    raise RuntimeError(f"could not place {n} centers at spacing {min_dist}")


def _paint_disc(canvas, cx, cy, radius, value):
    h, w = canvas.shape[:2]
    r = int(math.ceil(radius))
    x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 2, w)
    y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 2, h)
    gx, gy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    mask = (gx - cx) ** 2 + (gy - cy) ** 2 <= radius ** 2
    canvas[y0:y1, x0:x1][mask] = value


def generate_disc_image(rng, size: int = 512, n_discs: int = 30,
                        radius_range: tuple[float, float] = (8.0, 15.0),
                        background: int = 200, contrast: int = 40,
                        noise_sigma: float = 10.0):
    """Grayscale benchmark image with dark discs on a bright background.

    Disc intensity sits at least `contrast` gray levels below the
    background before Gaussian pixel noise is added. Returns
    (image, centers, radii) with centers as an (n, 2) array of (x, y).
    """
    r_lo, r_hi = radius_range
    min_dist = 2 * r_hi + 6
    centers = poisson_disc_centers(rng, size, n_discs, min_dist, margin=r_hi + 3)
    radii = rng.uniform(r_lo, r_hi, size=n_discs)
    canvas = np.full((size, size), float(background))
    for (cx, cy), radius in zip(centers, radii):
        depth = contrast + rng.uniform(0, 40)
        _paint_disc(canvas, cx, cy, radius, background - depth)
    canvas += rng.normal(0, noise_sigma, size=canvas.shape)
    img = GrayImage(np.clip(np.round(canvas), 0, 255).astype(np.uint8))
    return img, centers, radii


def generate_stained_spot(rng, size: int = 96, n_discs: int = 7,
                          stained_fraction: float = 0.5,
                          radius_range: tuple[float, float] = (6.0, 9.0),
                          noise_sigma: float = 8.0):
    """RGB spot image with a given fraction of brown-stained nuclei.

    Returns (image, truth) where truth is a list of dicts with keys
    x, y, radius, stained.
    """
    r_lo, r_hi = radius_range
    min_dist = 2 * r_hi + 5
    centers = poisson_disc_centers(rng, size, n_discs, min_dist, margin=r_hi + 3)
    radii = rng.uniform(r_lo, r_hi, size=n_discs)
    n_stained = int(round(stained_fraction * n_discs))
    stained_mask = np.zeros(n_discs, dtype=bool)
    stained_mask[rng.choice(n_discs, size=n_stained, replace=False)] = True

    canvas = np.empty((size, size, 3), dtype=np.float64)
    canvas[:] = BACKGROUND_RGB
    truth = []
    for i, ((cx, cy), radius) in enumerate(zip(centers, radii)):
        base = STAINED_RGB if stained_mask[i] else UNSTAINED_RGB
        color = np.clip(np.array(base, dtype=np.float64) + rng.uniform(-12, 12, 3), 0, 255)
        for ch in range(3):
            _paint_disc(canvas[:, :, ch], cx, cy, radius, color[ch])
        truth.append({
            "x": float(cx), "y": float(cy), "radius": float(radius),
            "stained": bool(stained_mask[i]),
        })
    canvas += rng.normal(0, noise_sigma, size=canvas.shape)
    img = RgbImage(np.clip(np.round(canvas), 0, 255).astype(np.uint8))
    return img, truth


def sample_weibull_time(rng, alpha: float, lam: float, eta: float = 0.0) -> float:
    """Draw one event time with survival exp(-(t**alpha / lam) * exp(eta))."""
    u = rng.uniform()
    return float((-lam * math.log(u) * math.exp(-eta)) ** (1.0 / alpha))


@dataclass
class StudyDataset:
    """Paths and ground truth of one generated synthetic study."""

    root: Path
    spots_dir: Path
    annotations_dir: Path
    survival_csv: Path
    manifest_csv: Path
    truth: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)


def generate_study(root, seed: int = 0, n_patients: int = 140,
                   n_annotated: int = 3, effect: bool = True,
                   spot_size: int = 96, discs_per_spot: int = 7,
                   alpha: float = 1.5, lam: float = 60.0,
                   hazard_ratio: float = 2.0,
                   pixel_resolution_um: float = 0.23) -> StudyDataset:
    """Write a complete synthetic study to disk.

    One spot per patient. The lower half of patients gets a low stained
    fraction, the upper half a high one. With effect=True, the
    high-staining half draws survival with `hazard_ratio` times the
    baseline hazard; with effect=False each low patient's survival
    outcome is duplicated for its high partner, so the two staining
    groups have identical survival by construction.

    The first n_annotated spots carry full annotation files and serve as
    training data for detection and staining models.
    """
    if n_patients % 2 != 0:
        raise ValueError("n_patients must be even (patients are paired)")
    root = Path(root)
    spots_dir = root / "spots"
    ann_dir = root / "annotations"
    spots_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)

    master = np.random.SeedSequence(seed)
    img_rng = np.random.default_rng(master.spawn(1)[0])
    surv_rng = np.random.default_rng(master.spawn(1)[0])

    half = n_patients // 2
    truth = {}
    groups = {}
    survival: list[SurvivalRecord] = []
    manifest_rows = []
    eta_high = math.log(hazard_ratio)

    for i in range(n_patients):
        pid = f"p{i:04d}"
        spot_id = f"s{i:04d}"
        high = i >= half
        groups[pid] = "high" if high else "low"
        manifest_rows.append(
            (spot_id, pid, f"spots/{spot_id}.png", pixel_resolution_um)
        )
        frac = img_rng.uniform(0.65, 0.9) if high else img_rng.uniform(0.05, 0.25)
        img, spot_truth = generate_stained_spot(
            img_rng, size=spot_size, n_discs=discs_per_spot, stained_fraction=frac
        )
        save_image(img, spots_dir / f"{spot_id}.png")
        truth[spot_id] = spot_truth

        if i < n_annotated:
            annotations = [
                NucleusAnnotation(
                    x=t["x"], y=t["y"], radius=t["radius"],
                    label="cancerous",
                    confidence="certainly",
                    expert_id="expert-1",
                    session="training",
                    stained="stained" if t["stained"] else "unstained",
                )
                for t in spot_truth
            ]
            spot = SpotRecord(
                spot_id=spot_id, patient_id=pid,
                pixel_resolution_um=pixel_resolution_um,
                annotations=annotations,
            )
            save_annotations(spot, ann_dir / f"{spot_id}.json")

    if effect:
        for i in range(n_patients):
            eta = eta_high if i >= half else 0.0
            t = sample_weibull_time(surv_rng, alpha, lam, eta)
            survival.append(SurvivalRecord(f"p{i:04d}", round(t, 4) + 0.0001, 1, {}))
    else:
        # Identical outcomes across the pairing removes any group signal.
        for i in range(half):
            t = round(sample_weibull_time(surv_rng, alpha, lam), 4) + 0.0001
            survival.append(SurvivalRecord(f"p{i:04d}", t, 1, {}))
            survival.append(SurvivalRecord(f"p{i + half:04d}", t, 1, {}))
        survival.sort(key=lambda r: r.patient_id)

    survival_csv = root / "survival.csv"
    save_survival_csv(survival, survival_csv)
    manifest_csv = root / "spots.csv"
    with open(manifest_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["spot_id", "patient_id", "image", "pixel_resolution_um"])
        for row in manifest_rows:
            writer.writerow(row)
    return StudyDataset(
        root=root,
        spots_dir=spots_dir,
        annotations_dir=ann_dir,
        survival_csv=survival_csv,
        manifest_csv=manifest_csv,
        truth=truth,
        groups=groups,
    )
