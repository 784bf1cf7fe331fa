import io

import numpy as np
import pytest
from scipy import ndimage

from shape_tta import metrics
from shape_tta.metrics import MetricReport


def blob_volume(seed, shape=(8, 20, 20), sigma=2.0, level=0.55):
    field = ndimage.gaussian_filter(np.random.default_rng(seed).uniform(size=shape), sigma)
    field = (field - field.min()) / (field.max() - field.min())
    return (field > level).astype(np.uint8)


def edt_asd(a, b):
    """Oracle: scipy surfaces (6-connected erosion) and exact distance transforms."""
    st = ndimage.generate_binary_structure(3, 1)
    sa = a & ~ndimage.binary_erosion(a, st, border_value=0)
    sb = b & ~ndimage.binary_erosion(b, st, border_value=0)
    da = ndimage.distance_transform_edt(~sb)[sa]
    db = ndimage.distance_transform_edt(~sa)[sb]
    return np.concatenate([da, db]).mean()


def test_dice_identical_and_disjoint():
    a = np.zeros((2, 4, 4), dtype=np.uint8)
    a[0, :2] = 1
    b = np.zeros_like(a)
    b[1, 2:] = 1
    assert metrics.dice3d(a, a, 1) == 100.0
    assert metrics.dice3d(a, b, 1) == 0.0
    assert metrics.dice3d(a, a, 3) == 100.0  # both empty


def test_dice_half_overlap():
    g = np.zeros((2, 4, 4), dtype=np.uint8)
    g[:, :2] = 1
    p = np.zeros_like(g)
    p[:, :1] = 1
    assert metrics.dice3d(p, g, 1) == pytest.approx(200 / 3, abs=1e-9)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        metrics.dice3d(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 1)


def test_asd_identical_is_zero():
    v = blob_volume(0)
    assert metrics.asd3d(v, v, 1) == 0.0


def test_asd_parallel_plates():
    a = np.zeros((10, 12, 12), dtype=np.uint8)
    b = np.zeros_like(a)
    a[2] = 1
    b[5] = 1
    assert metrics.asd3d(a, b, 1) == pytest.approx(3.0, abs=1e-12)


def test_asd_empty_is_undefined():
    a = np.zeros((2, 4, 4), dtype=np.uint8)
    b = a.copy()
    b[0, 0, 0] = 1
    assert metrics.asd3d(a, b, 1) is None


@pytest.mark.parametrize("seed", range(6))
def test_asd_matches_distance_transform(seed):
    a = blob_volume(seed).astype(bool)
    b = blob_volume(seed + 100).astype(bool)
    assert a.any() and b.any()
    assert metrics.asd3d(a.astype(np.uint8), b.astype(np.uint8), 1) == pytest.approx(edt_asd(a, b), abs=1e-6)


def test_surface_matches_erosion():
    v = blob_volume(3).astype(bool)
    st = ndimage.generate_binary_structure(3, 1)
    np.testing.assert_array_equal(metrics.surface_voxels(v), v & ~ndimage.binary_erosion(v, st, border_value=0))


def test_symmetry():
    a, b = blob_volume(1), blob_volume(2)
    assert metrics.dice3d(a, b, 1) == metrics.dice3d(b, a, 1)
    assert metrics.asd3d(a, b, 1) == pytest.approx(metrics.asd3d(b, a, 1), abs=1e-12)


def test_translation_invariance():
    a = np.zeros((8, 24, 24), dtype=np.uint8)
    b = np.zeros_like(a)
    a[2:6, 4:12, 5:11] = 1
    b[3:6, 6:13, 5:10] = 1
    shifted = lambda v: np.roll(v, (1, 5, 7), axis=(0, 1, 2))  # noqa: E731, stays in bounds
    assert metrics.dice3d(shifted(a), shifted(b), 1) == pytest.approx(metrics.dice3d(a, b, 1), abs=1e-12)
    assert metrics.asd3d(shifted(a), shifted(b), 1) == pytest.approx(metrics.asd3d(a, b, 1), abs=1e-12)


def test_evaluate_report():
    v = blob_volume(4)
    r = metrics.evaluate(v, v, [1], "m", "s")
    assert r.dsc == {1: 100.0} and r.asd == {1: 0.0}
    assert r.mean_dsc == 100.0 and r.mean_asd == 0.0


def _reports():
    return [
        MetricReport("NoAdap", "a", {1: 50.0, 2: 70.0}, {1: 2.0, 2: None}),
        MetricReport("NoAdap", "b", {1: 60.0, 2: 90.0}, {1: 4.0, 2: 1.0}),
        MetricReport("TTAS_RC", "a", {1: 80.0, 2: 85.0}, {1: 1.0, 2: 1.5}),
    ]


def test_tabulate_columns_and_order():
    csv_text, text = metrics.tabulate(_reports(), class_names=["BG", "LV", "MYO"])
    lines = csv_text.splitlines()
    assert lines[0] == "Method,DSC LV,DSC MYO,DSC Mean,ASD LV,ASD MYO,ASD Mean"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["NoAdap", "TTAS_RC"]
    assert text.splitlines()[0].split()[0] == "Method"


def test_tabulate_mean_is_average_of_classes():
    rows = metrics.summarize(_reports())
    for r in rows:
        assert r["dsc_mean"] == pytest.approx(np.mean(list(r["dsc"].values())), abs=1e-9)
    assert rows[0]["dsc"][1] == pytest.approx(55.0)


def test_missing_asd_rendered_and_footnoted():
    reps = [MetricReport("Tent", "a", {1: 0.0}, {1: None})]
    csv_text, text = metrics.tabulate(reps)
    assert "n/a" in csv_text and "n/a" in text
    assert "1 undefined ASD" in text
    # a missing value is skipped, not averaged in as zero
    assert metrics.summarize(_reports())[0]["asd"][2] == 1.0


def test_long_csv_round_trip():
    buf = io.StringIO()
    metrics.write_csv(_reports(), buf)
    back = metrics.read_csv(io.StringIO(buf.getvalue()))
    assert [(r.method, r.subject) for r in back] == [("NoAdap", "a"), ("NoAdap", "b"), ("TTAS_RC", "a")]
    assert back[0].asd["2"] is None and back[1].dsc["2"] == 90.0
