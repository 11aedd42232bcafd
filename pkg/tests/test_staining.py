import numpy as np
import pytest

from tmalab.detection import Detection
from tmalab.images import RgbImage
from tmalab.staining import (
    ColorHistogram,
    classify_staining,
    fit_staining_model,
    histogram_at,
    load_staining_csv,
    patient_staining,
    patient_staining_multi,
    save_staining_csv,
)


def uniform_hist(bins):
    n = bins ** 3
    return ColorHistogram(np.full(n, 1.0 / n), bins)


def point_hist(bins, idx):
    c = np.zeros(bins ** 3)
    c[idx] = 1.0
    return ColorHistogram(c, bins)


def reference_histogram(pixels, cx, cy, radius, bins):
    """Direct per-pixel recount with scalar arithmetic."""
    h, w = pixels.shape[:2]
    counts = np.zeros(bins ** 3)
    for y in range(h):
        for x in range(w):
            if (x - cx) ** 2 + (y - cy) ** 2 <= radius ** 2:
                r, g, b = (int(v) for v in pixels[y, x])
                idx = ((r * bins) // 256 * bins + (g * bins) // 256) * bins \
                    + (b * bins) // 256
                counts[idx] += 1
    return counts / counts.sum()


def test_histogram_validation():
    with pytest.raises(ValueError):
        ColorHistogram(np.ones(8), 3)
    with pytest.raises(ValueError):
        ColorHistogram(np.full(8, 0.25), 2)
    bad = np.zeros(8)
    bad[0] = 1.5
    bad[1] = -0.5
    with pytest.raises(ValueError):
        ColorHistogram(bad, 2)


def test_histogram_at_matches_scalar_recount():
    rng = np.random.default_rng(0)
    img = RgbImage(rng.integers(0, 256, size=(20, 24, 3), dtype=np.uint8))
    for _ in range(10):
        cx = float(rng.uniform(0, 23))
        cy = float(rng.uniform(0, 19))
        radius = float(rng.uniform(1.0, 5.0))
        bins = int(rng.integers(2, 9))
        got = histogram_at(img, (cx, cy), radius, bins)
        ref = reference_histogram(img.pixels, cx, cy, radius, bins)
        assert got.bins_per_channel == bins
        assert np.allclose(got.counts, ref, atol=1e-12)
        assert got.counts.sum() == pytest.approx(1.0)


def test_histogram_at_clips_at_border():
    img = RgbImage(np.full((10, 10, 3), 100, dtype=np.uint8))
    edge = histogram_at(img, (0.0, 0.0), 3.0, 4)
    ref = reference_histogram(img.pixels, 0.0, 0.0, 3.0, 4)
    assert np.allclose(edge.counts, ref)


def test_histogram_at_outside_image_rejected():
    img = RgbImage(np.zeros((10, 10, 3), dtype=np.uint8))
    with pytest.raises(ValueError, match="outside"):
        histogram_at(img, (50.0, 50.0), 2.0, 4)
    with pytest.raises(ValueError):
        histogram_at(img, (5.0, 5.0), 2.0, 0)


def test_histogram_tiny_radius_is_center_pixel():
    img = RgbImage(np.zeros((5, 5, 3), dtype=np.uint8))
    hgram = histogram_at(img, (2.0, 2.0), 0.4, 2)
    assert hgram.counts[0] == 1.0


def test_fit_model_averages_and_validates():
    b = 2
    m = fit_staining_model([point_hist(b, 0), point_hist(b, 1)],
                           [point_hist(b, 7)], radius=4.0)
    assert np.allclose(m.stained_centroid[[0, 1]], 0.5)
    assert m.unstained_centroid[7] == 1.0
    assert m.radius == 4.0
    with pytest.raises(ValueError):
        fit_staining_model([], [point_hist(b, 0)], radius=4.0)
    with pytest.raises(ValueError):
        fit_staining_model([point_hist(2, 0)], [point_hist(3, 0)], radius=4.0)


def test_classification_nearest_centroid_tie_unstained():
    b = 2
    model = fit_staining_model([point_hist(b, 0)], [point_hist(b, 7)], 4.0)
    assert classify_staining(model, point_hist(b, 0)) == "stained"
    assert classify_staining(model, point_hist(b, 7)) == "unstained"
    # equidistant from both centroids
    assert classify_staining(model, point_hist(b, 3)) == "unstained"
    with pytest.raises(ValueError):
        classify_staining(model, point_hist(3, 0))


def test_patient_staining_percentage():
    # stained pixels dark brown-ish, unstained blue-ish
    img = np.zeros((30, 30, 3), dtype=np.uint8)
    img[:, :15] = (130, 90, 50)
    img[:, 15:] = (70, 80, 160)
    rgb = RgbImage(img)
    b = 4
    model = fit_staining_model(
        [histogram_at(rgb, (5.0, 5.0), 3.0, b)],
        [histogram_at(rgb, (25.0, 5.0), 3.0, b)],
        radius=3.0,
    )
    dets = [Detection(4.0, 10.0, 1.0), Detection(6.0, 20.0, 1.0),
            Detection(24.0, 10.0, 1.0), Detection(25.0, 20.0, 1.0)]
    res = patient_staining("p01", rgb, dets, model)
    assert res.n_detected == 4
    assert res.n_stained == 2
    assert res.percentage == pytest.approx(50.0)
    assert res.flags == []


def test_patient_staining_multi_aggregates_spots():
    img = np.zeros((12, 12, 3), dtype=np.uint8)
    img[:] = (130, 90, 50)
    stained_img = RgbImage(img)
    img2 = np.zeros((12, 12, 3), dtype=np.uint8)
    img2[:] = (70, 80, 160)
    unstained_img = RgbImage(img2)
    b = 4
    model = fit_staining_model(
        [histogram_at(stained_img, (6.0, 6.0), 2.0, b)],
        [histogram_at(unstained_img, (6.0, 6.0), 2.0, b)],
        radius=2.0,
    )
    spots = [
        (stained_img, [Detection(5.0, 5.0, 1.0), Detection(7.0, 7.0, 1.0)]),
        (unstained_img, [Detection(6.0, 6.0, 1.0)]),
    ]
    res = patient_staining_multi("p02", spots, model)
    assert (res.n_detected, res.n_stained) == (3, 2)
    assert res.percentage == pytest.approx(200.0 / 3.0)


def test_patient_staining_zero_detections_flagged():
    img = RgbImage(np.zeros((8, 8, 3), dtype=np.uint8))
    model = fit_staining_model([point_hist(2, 0)], [point_hist(2, 7)], 2.0)
    res = patient_staining("p03", img, [], model)
    assert res.n_detected == 0
    assert res.percentage == 0.0
    assert res.flags == ["no nuclei detected"]


def test_staining_csv_round_trip(tmp_path):
    from tmalab.staining import PatientStaining

    rows = [
        PatientStaining("p01", 12, 5, 100.0 * 5 / 12),
        PatientStaining("p02", 0, 0, 0.0, flags=["no nuclei detected"]),
    ]
    path = tmp_path / "staining.csv"
    save_staining_csv(rows, path)
    back = load_staining_csv(path)
    assert back == rows

    path.write_text("who,what\n")
    with pytest.raises(ValueError, match="header"):
        load_staining_csv(path)
