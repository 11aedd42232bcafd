"""End-to-end study runner.

Takes a cohort (spot manifest, annotation files for the training spots,
survival table), trains or loads a detection forest, detects nuclei on
every spot, scores staining per patient, splits the cohort by staining
and compares survival between the halves.

All analysis outputs are a pure function of the inputs and the
configuration, so rerunning a study writes byte-identical result files.
Wall-clock metadata goes into a separate run_info.json that is excluded
from that guarantee.
"""

from __future__ import annotations

import csv
import datetime
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from .data import DataError, load_annotations, load_survival_csv
from .detection import (
    Detection,
    MeanShiftConfig,
    detect_nuclei,
    disc_pixel_count,
    voronoi_negative_samples,
)
from .forest import (
    DetectionForest,
    ForestConfig,
    load_forest,
    save_forest,
    train_forest,
)
from .images import extract_patch, load_image, to_gray
from .staining import (
    fit_staining_model,
    histogram_at,
    patient_staining_multi,
    save_staining_csv,
)
from .survival import (
    kaplan_meier,
    log_rank,
    save_km_csv,
    split_by_staining,
)


class ConfigError(Exception):
    """Invalid or inconsistent study configuration."""


@dataclass
class StudyConfig:
    """Everything run_study needs, with paths resolved to absolute."""

    manifest_csv: Path
    annotations_dir: Path
    survival_csv: Path
    out_dir: Path
    forest_path: Path | None = None      # load instead of training
    window: int = 33
    n_trees: int = 16
    max_depth: int = 10
    n_features_per_node: int = 20
    background_ratio: float = 1.0
    seed: int = 0
    stride: int = 3
    radius: float | None = None          # None: mean annotated radius
    min_distance: float | None = None    # None: min annotated radius
    min_mass_fraction: float | None = None   # None: kernel default
    bins_per_channel: int = 8
    split_rule: str = "median"

    def __post_init__(self):
        for name in ("manifest_csv", "annotations_dir", "survival_csv", "out_dir"):
            setattr(self, name, Path(getattr(self, name)))
        if self.forest_path is not None:
            self.forest_path = Path(self.forest_path)
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError("window must be an odd integer >= 3")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")


_CONFIG_KEYS = {f.name for f in fields(StudyConfig)}


def config_from_dict(raw: dict, base_dir=".") -> StudyConfig:
    """Build a StudyConfig from a flat mapping, e.g. a parsed TOML file.

    Relative paths are resolved against base_dir. Unknown keys are
    rejected so typos do not silently fall back to defaults.
    """
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = [k for k in ("manifest_csv", "annotations_dir", "survival_csv", "out_dir")
               if k not in raw]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    base = Path(base_dir)
    kwargs = dict(raw)
    for key in ("manifest_csv", "annotations_dir", "survival_csv", "out_dir",
                "forest_path"):
        if kwargs.get(key) is not None:
            kwargs[key] = base / Path(kwargs[key])
    try:
        return StudyConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_from_toml(path) -> StudyConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    return config_from_dict(raw, base_dir=path.parent)


@dataclass
class SpotEntry:
    spot_id: str
    patient_id: str
    image_path: Path
    pixel_resolution_um: float


def load_manifest(path) -> list[SpotEntry]:
    path = Path(path)
    entries = []
    seen = set()
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["spot_id", "patient_id", "image", "pixel_resolution_um"]:
            raise DataError(f"{path}: unexpected manifest header {header}")
        for ln, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"{path}:{ln}: expected 4 columns, got {len(row)}")
            spot_id, patient_id, image, res = row
            if spot_id in seen:
                raise DataError(f"{path}:{ln}: duplicate spot_id {spot_id!r}")
            seen.add(spot_id)
            try:
                res_um = float(res)
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: bad resolution {res!r}") from exc
            entries.append(SpotEntry(spot_id, patient_id,
                                     path.parent / image, res_um))
    if not entries:
        raise DataError(f"{path}: manifest lists no spots")
    return entries


@dataclass
class StudyResult:
    """Outcome of one study run, mirrored by out_dir/result.json."""

    forest: DetectionForest
    detections: dict                     # spot_id -> list[Detection]
    staining: list                       # PatientStaining, sorted by id
    split_threshold: float
    low_patients: list[str]
    high_patients: list[str]
    chi2: float
    p_value: float
    quarantined: dict = field(default_factory=dict)   # spot_id -> reason
    notes: list[str] = field(default_factory=list)
    out_dir: Path | None = None


@dataclass
class TrainingData:
    """Forest training set plus staining references from annotated spots.

    patches holds raw (window, window) pixel arrays ready for stacking.
    """

    patches: list
    labels: list
    stained_hists: list
    unstained_hists: list
    mean_radius: float


def collect_training_data(entries, annotations_dir, window: int, *,
                          min_distance: float | None = None,
                          radius: float | None = None,
                          bins_per_channel: int = 8) -> TrainingData:
    """Collect annotated spots and build the forest training set plus the
    staining reference histograms.

    Positives are patches at annotation centers; negatives come from the
    Voronoi vertices of the annotation layout, kept when farther from
    every annotation than min_distance (default: that spot's smallest
    annotated radius).
    """
    annotations_dir = Path(annotations_dir)
    patches, labels = [], []
    stained_hists, unstained_hists = [], []
    radii = []
    n_annotated = 0
    for entry in entries:
        ann_path = annotations_dir / f"{entry.spot_id}.json"
        if not ann_path.exists():
            continue
        spot = load_annotations(ann_path)
        if not spot.annotations:
            continue
        n_annotated += 1
        img = load_image(entry.image_path)
        gray = to_gray(img)
        centers = np.array([[a.x, a.y] for a in spot.annotations])
        radii.extend(a.radius for a in spot.annotations)
        r_min = min(a.radius for a in spot.annotations)
        for a in spot.annotations:
            patches.append(
                extract_patch(gray, (round(a.x), round(a.y)), window).pixels)
            labels.append(1)
        negatives = voronoi_negative_samples(
            centers, (gray.width, gray.height),
            min_distance if min_distance is not None else r_min)
        for x, y in negatives:
            patches.append(extract_patch(gray, (int(x), int(y)), window).pixels)
            labels.append(0)
        hist_radius = radius if radius is not None else float(np.mean(
            [a.radius for a in spot.annotations]))
        for a in spot.annotations:
            hgram = histogram_at(img, (a.x, a.y), hist_radius, bins_per_channel)
            if a.stained == "stained":
                stained_hists.append(hgram)
            elif a.stained == "unstained":
                unstained_hists.append(hgram)
    if n_annotated == 0:
        raise DataError("no annotated training spots found")
    return TrainingData(patches, labels, stained_hists, unstained_hists,
                        float(np.mean(radii)))


def run_study(cfg: StudyConfig) -> StudyResult:
    """Run the full spot-to-survival analysis and write all outputs."""
    started = datetime.datetime.now(datetime.timezone.utc)
    entries = load_manifest(cfg.manifest_csv)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    training = collect_training_data(
        entries, cfg.annotations_dir, cfg.window,
        min_distance=cfg.min_distance, radius=cfg.radius,
        bins_per_channel=cfg.bins_per_channel)
    radius = cfg.radius if cfg.radius is not None else training.mean_radius

    if cfg.forest_path is not None:
        forest = load_forest(cfg.forest_path)
        if forest.window != cfg.window:
            raise ConfigError(
                f"forest window {forest.window} != configured window {cfg.window}")
    else:
        fc = ForestConfig(
            n_trees=cfg.n_trees, max_depth=cfg.max_depth,
            n_features_per_node=cfg.n_features_per_node, window=cfg.window,
            background_ratio=cfg.background_ratio, rng_seed=cfg.seed)
        forest = train_forest(training.patches, training.labels, fc)
        save_forest(forest, cfg.out_dir / "forest.json")

    staining_model = fit_staining_model(training.stained_hists,
                                        training.unstained_hists, radius)
    min_mass = None
    if cfg.min_mass_fraction is not None:
        min_mass = cfg.min_mass_fraction * disc_pixel_count(radius)
    ms_cfg = MeanShiftConfig(radius=radius, min_mass=min_mass)

    detections: dict[str, list[Detection]] = {}
    quarantined: dict[str, str] = {}
    by_patient: dict[str, list] = {}
    for entry in entries:
        try:
            img = load_image(entry.image_path)
            dets = detect_nuclei(forest, to_gray(img), ms_cfg, stride=cfg.stride)
        except (DataError, ValueError) as exc:
            # One unreadable or degenerate spot must not sink the study.
            quarantined[entry.spot_id] = str(exc)
            continue
        detections[entry.spot_id] = dets
        by_patient.setdefault(entry.patient_id, []).append((img, dets))

    if not by_patient:
        raise DataError("every spot failed detection; nothing to analyze")

    staining = [patient_staining_multi(pid, spots, staining_model)
                for pid, spots in sorted(by_patient.items())]

    survival_records = {r.patient_id: r for r in load_survival_csv(cfg.survival_csv)}
    notes = []
    pairs = []
    for ps in staining:
        rec = survival_records.get(ps.patient_id)
        if rec is None:
            notes.append(f"patient {ps.patient_id} has no survival record")
            continue
        pairs.append((ps, rec))
    matched = {ps.patient_id for ps, _ in pairs}
    for pid in sorted(set(survival_records) - matched):
        notes.append(f"patient {pid} has survival data but no spot")
    if len(pairs) < 2:
        raise DataError("fewer than two patients with both staining and survival")

    low, high = split_by_staining(pairs, rule=cfg.split_rule)
    threshold = max(ps.percentage for ps, _ in low)
    km_low = kaplan_meier([rec for _, rec in low])
    km_high = kaplan_meier([rec for _, rec in high])
    lr = log_rank([rec for _, rec in low], [rec for _, rec in high])

    # Deterministic exports.
    with open(cfg.out_dir / "detections.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["spot_id", "x", "y", "score"])
        for spot_id in sorted(detections):
            for d in detections[spot_id]:
                writer.writerow([spot_id, repr(float(d.x)), repr(float(d.y)),
                                 repr(float(d.score))])
    save_staining_csv(staining, cfg.out_dir / "staining.csv")
    save_km_csv(km_low, cfg.out_dir / "km_low.csv")
    save_km_csv(km_high, cfg.out_dir / "km_high.csv")

    result = StudyResult(
        forest=forest,
        detections=detections,
        staining=staining,
        split_threshold=float(threshold),
        low_patients=sorted(ps.patient_id for ps, _ in low),
        high_patients=sorted(ps.patient_id for ps, _ in high),
        chi2=lr.chi2,
        p_value=lr.p_value,
        quarantined=quarantined,
        notes=notes,
        out_dir=cfg.out_dir,
    )
    payload = {
        "n_spots": len(entries),
        "n_quarantined": len(quarantined),
        "quarantined": {k: quarantined[k] for k in sorted(quarantined)},
        "n_patients": len(pairs),
        "split_rule": cfg.split_rule,
        "split_threshold": result.split_threshold,
        "low_patients": result.low_patients,
        "high_patients": result.high_patients,
        "staining": {
            ps.patient_id: {
                "n_detected": ps.n_detected,
                "n_stained": ps.n_stained,
                "percentage": ps.percentage,
                "flags": ps.flags,
            } for ps in staining
        },
        "log_rank": {"chi2": lr.chi2, "p_value": lr.p_value},
        "notes": notes,
    }
    with open(cfg.out_dir / "result.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")

    finished = datetime.datetime.now(datetime.timezone.utc)
    run_info = {
        "started_utc": started.isoformat(),
        "finished_utc": finished.isoformat(),
        "manifest_csv": str(cfg.manifest_csv),
        "survival_csv": str(cfg.survival_csv),
        "annotations_dir": str(cfg.annotations_dir),
        "seed": cfg.seed,
    }
    with open(cfg.out_dir / "run_info.json", "w") as fh:
        json.dump(run_info, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return result


def rerun_with_forest(cfg: StudyConfig, forest_path) -> StudyResult:
    """Convenience: run the same study against a previously saved forest."""
    return run_study(replace(cfg, forest_path=Path(forest_path)))
