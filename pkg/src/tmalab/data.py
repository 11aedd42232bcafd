"""Annotation and survival records with their on-disk formats.

Annotations travel as JSON documents keyed by spot, survival data as CSV
with one row per patient. Both round-trip without loss.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

from .images import DataError

NUCLEUS_CLASSES = ("cancerous", "benign")
CONFIDENCE_LEVELS = ("certainly", "probably", "maybe")
STAIN_STATES = ("stained", "unstained")

# Stroke colors for vector export, keyed by nucleus class.
SVG_COLORS = {"cancerous": "#000000", "benign": "#ff0000"}


@dataclass
class NucleusAnnotation:
    """One expert mark: position, extent and classification."""

    x: float
    y: float
    radius: float
    label: str
    confidence: str
    expert_id: str
    session: str = ""
    stained: str | None = None
    timestamp: str | None = None

    def __post_init__(self):
        if not (self.radius > 0):
            raise ValueError("annotation radius must be positive")
        if self.label not in NUCLEUS_CLASSES:
            raise ValueError(f"unknown nucleus class {self.label!r}")
        if self.confidence not in CONFIDENCE_LEVELS:
            raise ValueError(f"unknown confidence {self.confidence!r}")
        if self.stained is not None and self.stained not in STAIN_STATES:
            raise ValueError(f"unknown stain state {self.stained!r}")


@dataclass
class SpotRecord:
    """A tissue spot image with its metadata and annotations.

    Each spot belongs to exactly one patient; a patient may contribute
    several spots.
    """

    spot_id: str
    patient_id: str
    pixel_resolution_um: float
    annotations: list[NucleusAnnotation] = field(default_factory=list)
    image_path: str | None = None

    def __post_init__(self):
        if not self.spot_id:
            raise ValueError("spot_id must be non-empty")
        if not (self.pixel_resolution_um > 0):
            raise ValueError("pixel resolution must be positive")


def spot_to_json(spot: SpotRecord) -> dict:
    return {
        "spot_id": spot.spot_id,
        "patient_id": spot.patient_id,
        "pixel_resolution_um": spot.pixel_resolution_um,
        "annotations": [
            {
                "x": a.x,
                "y": a.y,
                "radius": a.radius,
                "class": a.label,
                "stained": a.stained,
                "confidence": a.confidence,
                "expert_id": a.expert_id,
                "session": a.session,
                "timestamp_iso8601": a.timestamp,
            }
            for a in spot.annotations
        ],
    }


def spot_from_json(doc: dict) -> SpotRecord:
    try:
        annotations = [
            NucleusAnnotation(
                x=float(a["x"]),
                y=float(a["y"]),
                radius=float(a["radius"]),
                label=a["class"],
                confidence=a["confidence"],
                expert_id=a["expert_id"],
                session=a.get("session", ""),
                stained=a.get("stained"),
                timestamp=a.get("timestamp_iso8601"),
            )
            for a in doc["annotations"]
        ]
        return SpotRecord(
            spot_id=doc["spot_id"],
            patient_id=doc["patient_id"],
            pixel_resolution_um=float(doc["pixel_resolution_um"]),
            annotations=annotations,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed annotation document: {exc}") from exc


def save_annotations(spot: SpotRecord, path) -> None:
    with open(path, "w") as fh:
        json.dump(spot_to_json(spot), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_annotations(path) -> SpotRecord:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"cannot read annotation file {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from None
    return spot_from_json(doc)


def annotations_to_svg(spot: SpotRecord, width: int, height: int,
                       colors: dict | None = None) -> str:
    """Render annotations as an SVG overlay, one circle per mark."""
    colors = colors or SVG_COLORS
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    for a in spot.annotations:
        stroke = colors.get(a.label, "#808080")
        lines.append(
            f'  <circle cx="{a.x:g}" cy="{a.y:g}" r="{a.radius:g}" '
            f'fill="none" stroke="{stroke}" stroke-width="2"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


@dataclass
class SurvivalRecord:
    """Follow-up of one patient: time on study and event indicator.

    event is 1 when the terminal event was observed and 0 when the patient
    was censored at `time_months`.
    """

    patient_id: str
    time_months: float
    event: int
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.time_months > 0) or not math.isfinite(self.time_months):
            raise ValueError("survival time must be positive and finite")
        if self.event not in (0, 1):
            raise ValueError("event must be 0 or 1")


def save_survival_csv(records: list[SurvivalRecord], path) -> None:
    cov_names = sorted({k for r in records for k in r.covariates})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "time_months", "event"] + cov_names)
        for r in records:
            row = [r.patient_id, repr(float(r.time_months)), r.event]
            row += [repr(float(r.covariates[k])) if k in r.covariates else ""
                    for k in cov_names]
            writer.writerow(row)


def load_survival_csv(path) -> list[SurvivalRecord]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:3] != ["patient_id", "time_months", "event"]:
                raise DataError(
                    f"{path}: expected header patient_id,time_months,event,..."
                )
            cov_names = header[3:]
            records = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    covs = {
                        name: float(val)
                        for name, val in zip(cov_names, row[3:])
                        if val != ""
                    }
                    records.append(
                        SurvivalRecord(
                            patient_id=row[0],
                            time_months=float(row[1]),
                            event=int(row[2]),
                            covariates=covs,
                        )
                    )
                except (IndexError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: bad survival row: {exc}") from None
    except FileNotFoundError:
        raise DataError(f"cannot read survival file {path}") from None
    return records
