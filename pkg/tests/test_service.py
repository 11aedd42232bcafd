"""Endpoint contract tests for the HTTP service.

A small synthetic cohort backs two apps: one fully loaded (forest plus
study config) and one bare (images only). Tests go through fastapi's
TestClient and treat the service as a black box; the only disk poke is
the write-ahead correction log, which is part of the contract.
"""

import io
import json
from types import SimpleNamespace

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from tmalab.detection import probability_map
from tmalab.forest import ForestConfig, load_forest, save_forest, train_forest
from tmalab.images import load_image, to_gray
from tmalab.online import OnlineParams, read_correction_log
from tmalab.pipeline import collect_training_data, load_manifest
from tmalab.service import create_app
from tmalab.synthetic import generate_study

WINDOW = 17
SPOT_SIZE = 96


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("service")
    ds = generate_study(root / "data", seed=0, n_patients=8, n_annotated=4)
    entries = load_manifest(ds.manifest_csv)
    training = collect_training_data(entries, ds.annotations_dir, WINDOW)
    patches = np.stack(training.patches)
    labels = np.asarray(training.labels, dtype=np.int64)
    forest = train_forest(
        patches, labels,
        ForestConfig(n_trees=6, max_depth=8, window=WINDOW, rng_seed=0))
    forest_path = root / "forest.json"
    save_forest(forest, forest_path)

    study_out = root / "study_out"
    config_path = root / "study.toml"
    config_path.write_text(
        f'manifest_csv = "{ds.manifest_csv}"\n'
        f'annotations_dir = "{ds.annotations_dir}"\n'
        f'survival_csv = "{ds.survival_csv}"\n'
        f'out_dir = "{study_out}"\n'
        "n_trees = 8\n"
        "max_depth = 8\n"
        "min_mass_fraction = 0.5\n"
        "stride = 3\n"
        "seed = 0\n")
    return SimpleNamespace(
        ds=ds, entries=entries, patches=patches, labels=labels,
        forest_path=forest_path, config_path=config_path,
        study_out=study_out, serve_out=root / "serve_out")


@pytest.fixture(scope="module")
def api(cohort):
    app = create_app(
        cohort.ds.manifest_csv, cohort.ds.annotations_dir, cohort.serve_out,
        forest_path=cohort.forest_path,
        study_config_path=cohort.config_path,
        detection_radius=6.0, stride=3,
        online_params=OnlineParams(beta=0.5, k_new=1, buffer_batch=3),
        train_patches=cohort.patches, train_labels=cohort.labels,
        seed=7)
    return TestClient(app)


@pytest.fixture(scope="module")
def bare(cohort, tmp_path_factory):
    out = tmp_path_factory.mktemp("bare_out")
    app = create_app(cohort.ds.manifest_csv, cohort.ds.annotations_dir, out)
    return TestClient(app)


def decode_png(body):
    return Image.open(io.BytesIO(body))


def test_list_spots(api, cohort):
    r = api.get("/spots")
    assert r.status_code == 200
    spots = r.json()["spots"]
    ids = [s["spot_id"] for s in spots]
    assert ids == sorted(e.spot_id for e in cohort.entries)
    assert len(ids) == 8
    for s in spots:
        assert s["width"] == SPOT_SIZE and s["height"] == SPOT_SIZE
        assert s["patient_id"].startswith("p")
        assert s["pixel_resolution_um"] > 0


def test_image_pyramid_levels(api, cohort):
    sizes = {}
    for level in (0, 1, 2):
        r = api.get("/spots/s0000/image", params={"level": level})
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        img = decode_png(r.content)
        sizes[level] = img.size
    assert sizes[0] == (SPOT_SIZE, SPOT_SIZE)
    assert sizes[1] == (SPOT_SIZE // 4, SPOT_SIZE // 4)
    assert sizes[2] == (SPOT_SIZE // 16, SPOT_SIZE // 16)

    # Level 0 must be the stored pixels untouched.
    full = decode_png(api.get("/spots/s0000/image").content)
    entry = next(e for e in cohort.entries if e.spot_id == "s0000")
    disk = load_image(entry.image_path)
    assert np.array_equal(np.asarray(full), np.asarray(disk.pixels))


def test_image_level_out_of_range(api):
    assert api.get("/spots/s0000/image", params={"level": 3}).status_code == 422
    assert api.get("/spots/s0000/image", params={"level": -1}).status_code == 422


def test_unknown_spot_is_404(api):
    for path in ("/spots/zzz/image", "/spots/zzz/detections",
                 "/spots/zzz/probability-map", "/spots/zzz/annotations"):
        r = api.get(path)
        assert r.status_code == 404
        assert "zzz" in r.json()["detail"]
    assert api.post("/spots/zzz/corrections", json={}).status_code == 404


def test_probability_map_matches_forest(api, cohort):
    r = api.get("/spots/s0001/probability-map")
    assert r.status_code == 200
    img = decode_png(r.content)
    assert img.mode == "I;16"
    assert img.size == (SPOT_SIZE, SPOT_SIZE)

    entry = next(e for e in cohort.entries if e.spot_id == "s0001")
    gray = to_gray(load_image(entry.image_path))
    pmap = probability_map(load_forest(cohort.forest_path), gray, stride=3)
    expected = np.round(pmap.values * 65535.0).astype(np.uint16)
    assert np.array_equal(np.asarray(img, dtype=np.uint16), expected)


def test_detections_before_any_correction(api):
    r = api.get("/spots/s0000/detections")
    assert r.status_code == 200
    doc = r.json()
    assert doc["spot_id"] == "s0000"
    assert doc["forest_version"] == 0
    assert doc["classes"] == ["background", "nucleus"]
    for d in doc["detections"]:
        assert set(d) == {"x", "y", "score"}
        assert 0 <= d["x"] < SPOT_SIZE and 0 <= d["y"] < SPOT_SIZE
    # A second request is served from cache and must be identical.
    assert api.get("/spots/s0000/detections").json() == doc


def test_correction_validation(api, cohort):
    good = {"x": 10, "y": 12, "asserted_label": "nucleus",
            "expert_id": "e1", "session": "sess-a"}

    r = api.post("/spots/s0000/corrections",
                 json={k: v for k, v in good.items() if k not in ("y", "session")})
    assert r.status_code == 422
    assert "missing fields" in r.json()["detail"]
    assert "y" in r.json()["detail"] and "session" in r.json()["detail"]

    bad_label = dict(good, asserted_label="mitosis")
    r = api.post("/spots/s0000/corrections", json=bad_label)
    assert r.status_code == 422
    assert "mitosis" in r.json()["detail"]

    r = api.post("/spots/s0000/corrections", json=dict(good, x="left"))
    assert r.status_code == 422

    r = api.post("/spots/s0000/corrections", json=dict(good, x=SPOT_SIZE))
    assert r.status_code == 422

    # None of the rejected requests may touch the model or the log.
    assert api.get("/spots/s0000/detections").json()["forest_version"] == 0
    assert not (cohort.serve_out / "corrections.jsonl").exists()


def test_correction_applies_and_logs(api, cohort):
    body = {"x": 30, "y": 40, "asserted_label": "nucleus",
            "expert_id": "e1", "session": "sess-a"}
    r = api.post("/spots/s0000/corrections", json=body)
    assert r.status_code == 200
    doc = r.json()
    assert doc["spot_id"] == "s0000"
    assert doc["patient_id"] == "p0000"
    assert doc["predicted_label"] in ("background", "nucleus")
    assert doc["forest_version"] == 1
    assert doc["margin_after"] >= doc["margin_before"] - 1e-12

    log = read_correction_log(cohort.serve_out / "corrections.jsonl")
    assert len(log) == 1
    assert (log[0].spot_id, log[0].x, log[0].y) == ("s0000", 30, 40)
    assert log[0].asserted_label == "nucleus"
    assert log[0].expert_id == "e1"

    # Detections are recomputed for the new forest version.
    assert api.get("/spots/s0000/detections").json()["forest_version"] == 1


def test_correction_session_binding(api, cohort):
    other = {"x": 5, "y": 5, "asserted_label": "background",
             "expert_id": "e2", "session": "sess-b"}
    r = api.post("/spots/s0001/corrections", json=other)
    assert r.status_code == 409
    assert "sess-a" in r.json()["detail"]
    # The rejected request must not have been logged.
    assert len(read_correction_log(cohort.serve_out / "corrections.jsonl")) == 1

    r = api.post("/spots/s0001/corrections", json=dict(other, session="sess-a"))
    assert r.status_code == 200
    assert r.json()["forest_version"] == 2
    assert len(read_correction_log(cohort.serve_out / "corrections.jsonl")) == 2


def test_growth_requires_training_set(cohort, tmp_path):
    with pytest.raises(ValueError, match="train_patches"):
        create_app(cohort.ds.manifest_csv, cohort.ds.annotations_dir, tmp_path,
                   forest_path=cohort.forest_path,
                   online_params=OnlineParams(k_new=2))


def test_bare_app_has_images_but_no_model(bare):
    assert bare.get("/spots").status_code == 200
    assert bare.get("/spots/s0000/image").status_code == 200
    for r in (bare.get("/spots/s0000/detections"),
              bare.get("/spots/s0000/probability-map"),
              bare.post("/spots/s0000/corrections",
                        json={"x": 1, "y": 1, "asserted_label": "nucleus",
                              "expert_id": "e", "session": "s"})):
        assert r.status_code == 503
        assert r.json()["detail"] == "no forest loaded"
    r = bare.post("/study/run")
    assert r.status_code == 503
    r = bare.get("/study/result")
    assert r.status_code == 404


def test_study_run_and_result(api):
    r = api.post("/study/run")
    assert r.status_code == 200
    doc = r.json()
    assert doc["status"] == "completed"
    assert 0.0 <= doc["p_value"] <= 1.0
    assert doc["chi2"] >= 0.0
    assert doc["p_value"] < 0.05

    result = api.get("/study/result")
    assert result.status_code == 200
    payload = result.json()
    assert payload["n_patients"] == 8
    assert payload["log_rank"]["p_value"] == doc["p_value"]
    assert payload["log_rank"]["chi2"] == doc["chi2"]
    assert len(payload["low_patients"]) == 4
    assert len(payload["high_patients"]) == 4


def test_study_result_read_from_disk(cohort):
    # A fresh app whose out_dir holds a previous run's result.json serves
    # it without rerunning anything.
    app = create_app(cohort.ds.manifest_csv, cohort.ds.annotations_dir,
                     cohort.study_out)
    client = TestClient(app)
    r = client.get("/study/result")
    assert r.status_code == 200
    assert r.json()["n_patients"] == 8


def test_annotations_get(api):
    r = api.get("/spots/s0000/annotations")
    assert r.status_code == 200
    doc = r.json()
    assert doc["spot_id"] == "s0000"
    assert len(doc["annotations"]) > 0
    for a in doc["annotations"]:
        assert {"x", "y", "radius", "class", "stained", "confidence",
                "expert_id", "session", "timestamp_iso8601"} <= set(a)

    # Spots past the annotated prefix have no annotation file.
    assert api.get("/spots/s0007/annotations").status_code == 404


def test_annotations_put_roundtrip(api, cohort):
    path = cohort.ds.annotations_dir / "s0000.json"
    original = path.read_text()
    try:
        doc = api.get("/spots/s0000/annotations").json()
        doc["annotations"].append({
            "x": 5.0, "y": 6.0, "radius": 4.0, "class": "cancerous",
            "stained": "unstained", "confidence": "probably",
            "expert_id": "e9", "session": "sess-a",
            "timestamp_iso8601": None,
        })
        r = api.put("/spots/s0000/annotations", content=json.dumps(doc))
        assert r.status_code == 200
        assert r.json()["n_annotations"] == len(doc["annotations"])

        back = api.get("/spots/s0000/annotations").json()
        assert len(back["annotations"]) == len(doc["annotations"])
        added = back["annotations"][-1]
        assert (added["x"], added["y"], added["expert_id"]) == (5.0, 6.0, "e9")
    finally:
        path.write_text(original)


def test_annotations_put_rejects_bad_documents(api):
    r = api.put("/spots/s0000/annotations", content="{not json")
    assert r.status_code == 400

    doc = api.get("/spots/s0000/annotations").json()
    r = api.put("/spots/s0001/annotations", content=json.dumps(doc))
    assert r.status_code == 400
    assert "does not match" in r.json()["detail"]

    r = api.put("/spots/s0000/annotations", content=json.dumps({"spot_id": "s0000"}))
    assert r.status_code == 400
