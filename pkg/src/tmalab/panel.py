"""Multi-expert annotation analysis: voting, agreement, gold standards.

The central structure is a label matrix of n objects by D experts with
entries from {cancerous, benign} plus missing, each carrying a confidence
level. Repeated passes by the same expert quantify intra-observer
variability.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import CONFIDENCE_LEVELS, NUCLEUS_CLASSES

DISPUTED = "disputed"

# Row/column order of confidence confusion tables.
CONFUSION_LEVELS = tuple(
    (label, conf) for label in NUCLEUS_CLASSES for conf in CONFIDENCE_LEVELS
)


@dataclass
class LabelMatrix:
    """Labels and confidences of n objects by D experts; None is missing."""

    object_ids: tuple[str, ...]
    expert_ids: tuple[str, ...]
    labels: list[list[str | None]]
    confidence: list[list[str | None]]

    def __post_init__(self):
        n, dim = len(self.object_ids), len(self.expert_ids)
        if len(self.labels) != n or len(self.confidence) != n:
            raise ValueError("matrix rows must match object_ids")
        for row_l, row_c in zip(self.labels, self.confidence):
            if len(row_l) != dim or len(row_c) != dim:
                raise ValueError("matrix columns must match expert_ids")
            for lab, conf in zip(row_l, row_c):
                if lab is None:
                    continue
                if lab not in NUCLEUS_CLASSES:
                    raise ValueError(f"unknown label {lab!r}")
                if conf not in CONFIDENCE_LEVELS:
                    raise ValueError(f"label without valid confidence: {conf!r}")

    @property
    def n_objects(self) -> int:
        return len(self.object_ids)

    @property
    def n_experts(self) -> int:
        return len(self.expert_ids)


@dataclass
class VoteResult:
    object_id: str
    label: str  # a nucleus class, or "disputed" on an exact tie
    margin: float


def majority_vote(matrix: LabelMatrix) -> list[VoteResult]:
    """Plurality vote per object, ignoring missing labels.

    The margin is (winner votes - runner-up votes) / votes cast; exact
    ties give label "disputed" with margin 0.
    """
    results = []
    for oid, row in zip(matrix.object_ids, matrix.labels):
        counts = {c: 0 for c in NUCLEUS_CLASSES}
        for lab in row:
            if lab is not None:
                counts[lab] += 1
        cast = sum(counts.values())
        if cast == 0:
            raise ValueError(f"object {oid!r} has no labels at all")
        ranked = sorted(counts.items(), key=lambda kv: -kv[1])
        (top, top_n), (_, second_n) = ranked[0], ranked[1]
        if top_n == second_n:
            results.append(VoteResult(oid, DISPUTED, 0.0))
        else:
            results.append(VoteResult(oid, top, (top_n - second_n) / cast))
    return results


@dataclass
class RepeatObservation:
    """One object labelled twice by the same expert in different sessions."""

    expert_id: str
    object_id: str
    first_label: str
    first_confidence: str
    second_label: str
    second_confidence: str


@dataclass
class AgreementReport:
    n_objects: int
    n_unanimous: int
    n_unanimous_by_class: dict
    n_disputed: int
    intra_error: dict
    confusion_levels: tuple = CONFUSION_LEVELS
    confusion_combined: np.ndarray | None = None
    confusion_by_expert: dict = field(default_factory=dict)


def agreement_report(matrix: LabelMatrix, repeats=()) -> AgreementReport:
    """Unanimity statistics plus intra-observer error from repeated passes.

    An object is unanimous when every expert who labelled it chose the
    same class; otherwise it is disputed, so unanimous + disputed covers
    all objects. Repeats feed per-expert intra_error (fraction of
    class flips) and 6x6 confusion tables over (class, confidence).
    """
    unanimous = {c: 0 for c in NUCLEUS_CLASSES}
    disputed = 0
    for oid, row in zip(matrix.object_ids, matrix.labels):
        present = [lab for lab in row if lab is not None]
        if not present:
            raise ValueError(f"object {oid!r} has no labels at all")
        if all(lab == present[0] for lab in present):
            unanimous[present[0]] += 1
        else:
            disputed += 1

    level_index = {lc: i for i, lc in enumerate(CONFUSION_LEVELS)}
    k = len(CONFUSION_LEVELS)
    combined = np.zeros((k, k), dtype=np.int64)
    by_expert: dict[str, np.ndarray] = {}
    flips: dict[str, list[int]] = {}
    for rep in repeats:
        i = level_index[(rep.first_label, rep.first_confidence)]
        j = level_index[(rep.second_label, rep.second_confidence)]
        combined[i, j] += 1
        table = by_expert.setdefault(rep.expert_id, np.zeros((k, k), dtype=np.int64))
        table[i, j] += 1
        flips.setdefault(rep.expert_id, []).append(
            int(rep.first_label != rep.second_label)
        )

    intra = {eid: float(np.mean(v)) for eid, v in flips.items()}
    return AgreementReport(
        n_objects=matrix.n_objects,
        n_unanimous=sum(unanimous.values()),
        n_unanimous_by_class=unanimous,
        n_disputed=disputed,
        intra_error=intra,
        confusion_combined=combined,
        confusion_by_expert=by_expert,
    )


def save_label_csv(matrix: LabelMatrix, path, repeats=()) -> None:
    """Long-format CSV; repeats are written as extra session rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["object_id", "expert_id", "label", "confidence", "session"])
        for oid, row_l, row_c in zip(matrix.object_ids, matrix.labels, matrix.confidence):
            for eid, lab, conf in zip(matrix.expert_ids, row_l, row_c):
                if lab is not None:
                    writer.writerow([oid, eid, lab, conf, "1"])
        for rep in repeats:
            writer.writerow([rep.object_id, rep.expert_id, rep.second_label,
                             rep.second_confidence, "2"])


def load_label_csv(path):
    """Read a long-format label CSV.

    The first session per (object, expert) fills the matrix; later
    sessions pair with the first into RepeatObservation entries. Returns
    (matrix, repeats).
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["object_id", "expert_id", "label", "confidence", "session"]:
            raise ValueError(f"{path}: unexpected label header {header}")
        for r in reader:
            if r:
                rows.append(r)

    object_ids: list[str] = []
    expert_ids: list[str] = []
    first: dict[tuple[str, str], tuple[str, str]] = {}
    repeats: list[RepeatObservation] = []
    rows.sort(key=lambda r: r[4])  # session order decides first vs repeat
    for oid, eid, lab, conf, _session in rows:
        if oid not in object_ids:
            object_ids.append(oid)
        if eid not in expert_ids:
            expert_ids.append(eid)
        key = (oid, eid)
        if key not in first:
            first[key] = (lab, conf)
        else:
            f_lab, f_conf = first[key]
            repeats.append(RepeatObservation(eid, oid, f_lab, f_conf, lab, conf))

    labels = [[first.get((oid, eid), (None, None))[0] for eid in expert_ids]
              for oid in object_ids]
    confid = [[first.get((oid, eid), (None, None))[1] for eid in expert_ids]
              for oid in object_ids]
    matrix = LabelMatrix(tuple(object_ids), tuple(expert_ids), labels, confid)
    return matrix, repeats


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[rj] = ri


def gold_standard(detections_by_expert: dict, match_radius: float,
                  quorum: int = 2) -> np.ndarray:
    """Consensus positions from several experts' point sets.

    Points are clustered by single linkage at match_radius (any chain of
    pairwise-close points joins one cluster); clusters supported by at
    least `quorum` distinct experts survive and are reported by their
    centroid. Raising the quorum can only shrink the result.
    """
    if quorum < 1:
        raise ValueError("quorum must be at least 1")
    points = []
    owners = []
    for eid in sorted(detections_by_expert):
        for p in np.asarray(detections_by_expert[eid], dtype=np.float64).reshape(-1, 2):
            points.append(p)
            owners.append(eid)
    if not points:
        return np.zeros((0, 2))
    pts = np.array(points)
    n = len(pts)
    uf = _UnionFind(n)
    r2 = match_radius ** 2
    for i in range(n):
        d2 = ((pts[i + 1:] - pts[i]) ** 2).sum(axis=1)
        for j in np.nonzero(d2 <= r2)[0]:
            uf.union(i, i + 1 + int(j))

    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(uf.find(i), []).append(i)
    centroids = []
    for members in clusters.values():
        experts = {owners[i] for i in members}
        if len(experts) >= quorum:
            centroids.append(pts[members].mean(axis=0))
    if not centroids:
        return np.zeros((0, 2))
    out = np.array(centroids)
    return out[np.lexsort((out[:, 1], out[:, 0]))]


@dataclass
class DispersionReport:
    """Spread of independent staining estimates across experts."""

    means: np.ndarray
    sds: np.ndarray
    slope: float
    intercept: float


def staining_dispersion(estimates: np.ndarray) -> DispersionReport:
    """Per-spot mean and sample standard deviation of expert staining
    percentages, plus a least-squares line sd ~ slope * mean + intercept.

    estimates has one row per spot and one column per expert.
    """
    est = np.asarray(estimates, dtype=np.float64)
    if est.ndim != 2 or est.shape[1] < 2:
        raise ValueError("need at least 2 experts per spot")
    if est.shape[0] < 2:
        raise ValueError("need at least 2 spots to fit the dispersion line")
    means = est.mean(axis=1)
    sds = est.std(axis=1, ddof=1)
    design = np.column_stack([means, np.ones(len(means))])
    coef, *_ = np.linalg.lstsq(design, sds, rcond=None)
    return DispersionReport(means=means, sds=sds,
                            slope=float(coef[0]), intercept=float(coef[1]))
