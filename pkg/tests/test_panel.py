import numpy as np
import pytest

from tmalab.data import CONFIDENCE_LEVELS
from tmalab.panel import (
    CONFUSION_LEVELS,
    AgreementReport,
    LabelMatrix,
    RepeatObservation,
    agreement_report,
    gold_standard,
    load_label_csv,
    majority_vote,
    save_label_csv,
    staining_dispersion,
)

EXPERTS = tuple(f"e{k}" for k in range(5))


def make_panel_fixture():
    """180 objects by 5 experts: 81 unanimous cancerous, 24 unanimous
    benign, 75 split 3-2."""
    labels = []
    confidence = []
    object_ids = []
    for i in range(180):
        object_ids.append(f"n{i:03d}")
        if i < 81:
            row = ["cancerous"] * 5
        elif i < 105:
            row = ["benign"] * 5
        elif i % 2 == 0:
            row = ["cancerous", "cancerous", "cancerous", "benign", "benign"]
        else:
            row = ["benign", "benign", "benign", "cancerous", "cancerous"]
        labels.append(row)
        confidence.append([CONFIDENCE_LEVELS[(i + j) % 3] for j in range(5)])
    return LabelMatrix(tuple(object_ids), EXPERTS, labels, confidence)


def test_confusion_level_order():
    assert CONFUSION_LEVELS == (
        ("cancerous", "certainly"),
        ("cancerous", "probably"),
        ("cancerous", "maybe"),
        ("benign", "certainly"),
        ("benign", "probably"),
        ("benign", "maybe"),
    )


def test_label_matrix_validation():
    with pytest.raises(ValueError):
        LabelMatrix(("a",), ("e0",), [], [])
    with pytest.raises(ValueError):
        LabelMatrix(("a",), ("e0", "e1"), [["cancerous"]], [["maybe"]])
    with pytest.raises(ValueError, match="unknown label"):
        LabelMatrix(("a",), ("e0",), [["malignant"]], [["maybe"]])
    with pytest.raises(ValueError, match="confidence"):
        LabelMatrix(("a",), ("e0",), [["cancerous"]], [[None]])


def test_majority_vote_margins():
    m = LabelMatrix(
        ("a", "b", "c"),
        ("e0", "e1", "e2"),
        [["cancerous", "cancerous", "benign"],
         ["cancerous", "benign", None],
         ["benign", None, None]],
        [["maybe", "maybe", "maybe"],
         ["certainly", "probably", None],
         ["certainly", None, None]],
    )
    votes = majority_vote(m)
    assert votes[0].label == "cancerous"
    assert votes[0].margin == pytest.approx(1 / 3)
    assert votes[1].label == "disputed"
    assert votes[1].margin == 0.0
    assert votes[2].label == "benign"
    assert votes[2].margin == 1.0


def test_majority_vote_rejects_fully_missing_object():
    m = LabelMatrix(("a",), ("e0", "e1"), [[None, None]], [[None, None]])
    with pytest.raises(ValueError, match="no labels"):
        majority_vote(m)


def test_agreement_fixture_counts():
    report = agreement_report(make_panel_fixture())
    assert report.n_objects == 180
    assert report.n_unanimous == 105
    assert report.n_unanimous_by_class == {"cancerous": 81, "benign": 24}
    assert report.n_disputed == 75
    assert report.n_unanimous + report.n_disputed == report.n_objects


def test_agreement_counts_present_labels_only():
    m = LabelMatrix(
        ("a", "b"),
        ("e0", "e1", "e2"),
        [["cancerous", None, "cancerous"], ["benign", "cancerous", None]],
        [["maybe", None, "maybe"], ["maybe", "maybe", None]],
    )
    report = agreement_report(m)
    assert report.n_unanimous == 1
    assert report.n_disputed == 1


def test_intra_observer_error_and_confusion_tables():
    m = LabelMatrix(("a",), ("e0",), [["cancerous"]], [["certainly"]])
    reps = [
        RepeatObservation("e0", "a", "cancerous", "certainly",
                          "cancerous", "probably"),
        RepeatObservation("e0", "b", "cancerous", "maybe",
                          "benign", "maybe"),
        RepeatObservation("e0", "c", "benign", "certainly",
                          "benign", "certainly"),
        RepeatObservation("e0", "d", "cancerous", "certainly",
                          "cancerous", "certainly"),
        RepeatObservation("e1", "a", "benign", "probably",
                          "cancerous", "probably"),
    ]
    report = agreement_report(m, reps)
    assert report.intra_error == {"e0": 0.25, "e1": 1.0}
    k = len(CONFUSION_LEVELS)
    assert report.confusion_combined.shape == (k, k)
    assert report.confusion_combined.sum() == 5
    idx = {lc: i for i, lc in enumerate(CONFUSION_LEVELS)}
    cc = report.confusion_combined
    assert cc[idx[("cancerous", "certainly")], idx[("cancerous", "probably")]] == 1
    assert cc[idx[("cancerous", "maybe")], idx[("benign", "maybe")]] == 1
    assert cc[idx[("cancerous", "certainly")], idx[("cancerous", "certainly")]] == 1
    total = sum(t.sum() for t in report.confusion_by_expert.values())
    assert total == 5
    assert report.confusion_by_expert["e1"].sum() == 1


def test_label_csv_round_trip(tmp_path):
    m = LabelMatrix(
        ("a", "b"),
        ("e0", "e1"),
        [["cancerous", "benign"], ["benign", None]],
        [["certainly", "maybe"], ["probably", None]],
    )
    reps = [RepeatObservation("e0", "a", "cancerous", "certainly",
                              "benign", "maybe")]
    path = tmp_path / "labels.csv"
    save_label_csv(m, path, reps)
    back, back_reps = load_label_csv(path)
    assert back.object_ids == m.object_ids
    assert back.expert_ids == m.expert_ids
    assert back.labels == m.labels
    assert back.confidence == m.confidence
    assert back_reps == reps

    path.write_text("object,expert\n")
    with pytest.raises(ValueError, match="header"):
        load_label_csv(path)


def test_gold_standard_consensus_centroid():
    dets = {
        "A": [(0.0, 0.0), (10.0, 10.0)],
        "B": [(1.0, 0.0), (30.0, 30.0)],
    }
    out = gold_standard(dets, match_radius=2.0, quorum=2)
    assert out.tolist() == [[0.5, 0.0]]
    all_clusters = gold_standard(dets, match_radius=2.0, quorum=1)
    assert all_clusters.tolist() == [[0.5, 0.0], [10.0, 10.0], [30.0, 30.0]]


def test_gold_standard_single_linkage_chains():
    dets = {"A": [(0.0, 0.0), (3.0, 0.0)], "B": [(1.5, 0.0)]}
    out = gold_standard(dets, match_radius=2.0, quorum=2)
    assert out.tolist() == [[1.5, 0.0]]


def test_gold_standard_same_expert_does_not_make_quorum():
    dets = {"A": [(0.0, 0.0), (1.0, 0.0)]}
    assert gold_standard(dets, match_radius=2.0, quorum=2).shape == (0, 2)
    assert gold_standard({}, match_radius=2.0).shape == (0, 2)
    with pytest.raises(ValueError):
        gold_standard(dets, match_radius=2.0, quorum=0)


def test_gold_standard_quorum_monotone_on_random_panels():
    rng = np.random.default_rng(7)
    for _ in range(5):
        dets = {
            f"E{k}": rng.uniform(0, 50, size=(rng.integers(3, 12), 2))
            for k in range(4)
        }
        sizes = [len(gold_standard(dets, match_radius=3.0, quorum=q))
                 for q in range(1, 5)]
        assert sizes == sorted(sizes, reverse=True)


def test_staining_dispersion_matches_manual_fit():
    rng = np.random.default_rng(8)
    est = rng.uniform(0, 100, size=(6, 3))
    report = staining_dispersion(est)
    assert np.allclose(report.means, est.mean(axis=1))
    assert np.allclose(report.sds, est.std(axis=1, ddof=1))
    slope, intercept = np.polyfit(report.means, report.sds, 1)
    assert report.slope == pytest.approx(slope)
    assert report.intercept == pytest.approx(intercept)


def test_staining_dispersion_input_checks():
    with pytest.raises(ValueError):
        staining_dispersion(np.zeros((3, 1)))
    with pytest.raises(ValueError):
        staining_dispersion(np.zeros((1, 3)))


def test_agreement_report_dataclass_defaults():
    report = AgreementReport(1, 1, {"cancerous": 1, "benign": 0}, 0, {})
    assert report.confusion_levels == CONFUSION_LEVELS
