import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from defcor import io
from defcor.evaluate import (
    DegenerateMapError, baseline_predictor, correct_mask, deform_mask, dice, evaluate_run,
    gaussian_overlap, histogram_consistency, identity_predictor, linear_scaling_baseline,
    linear_scaling_field, oracle_predictor, ramp_depth_from_gt, tla)
from defcor.phantom import make_axial_ramp_field


def test_dice_examples():
    a = np.zeros((20, 20), bool)
    a[:10, :10] = True
    assert dice(a, a) == 100.0
    b = np.zeros_like(a)
    b[10:, 10:] = True
    assert dice(a, b) == 0.0
    c = np.zeros_like(a)
    c[5:15, :10] = True
    assert dice(a, c) == 50.0
    assert dice(a, c) == dice(c, a)
    with pytest.raises(ValueError):
        dice(a, np.zeros_like(a))


def line(y):
    return np.stack([np.arange(2.0, 30.0), np.full(28, float(y))], axis=1)


def test_tla_examples():
    gt = [line(100), line(40)]
    res = tla(gt, [g.copy() for g in gt])
    assert res.ha_mean == 1.0 and res.va_mean == 1.0
    moved = [line(90), line(40)]
    res = tla(gt, moved)
    assert res.per_interface[0][1] == pytest.approx(0.9)
    assert np.all((res.ha >= 0) & (res.ha <= 1)) and np.all((res.va >= 0) & (res.va <= 1))
    with pytest.raises(ValueError):
        tla(gt, gt[:1])


def test_tla_samples_every_five_pixels():
    res = tla([line(50)], [line(50)])
    assert res.ha.size == len(np.arange(2, 29 + 1e-9, 5))


def test_gaussian_overlap_matches_cdf_oracle():
    assert gaussian_overlap(0, 1, 1, 1) == pytest.approx(2 * norm.cdf(-0.5), abs=1e-12)
    assert abs(gaussian_overlap(0, 1, 1, 1) - 0.6171) <= 1e-3


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.2, 3), st.floats(-3, 3), st.floats(0.2, 3))
def test_gaussian_overlap_against_quadrature(m1, s1, m2, s2):
    lo, hi = min(m1 - 12 * s1, m2 - 12 * s2), max(m1 + 12 * s1, m2 + 12 * s2)
    points = sorted({m1, m2, m1 - s1, m1 + s1, m2 - s2, m2 + s2})
    ref, _ = quad(lambda x: min(norm.pdf(x, m1, s1), norm.pdf(x, m2, s2)), lo, hi,
                  points=points, limit=200)
    got = gaussian_overlap(m1, s1, m2, s2)
    assert got == pytest.approx(ref, abs=1e-6)
    assert got == pytest.approx(gaussian_overlap(m2, s2, m1, s1), abs=1e-12)


def test_histogram_consistency(rng):
    a = rng.normal(0, 1, (64, 64))
    assert histogram_consistency([a, a.copy()]) == [pytest.approx(0.0, abs=1e-12)]
    b = rng.normal(0.3, 1.2, (64, 64))
    s_ab, = histogram_consistency([a, b])
    s_ba, = histogram_consistency([b, a])
    assert 0 < s_ab == pytest.approx(s_ba)
    assert len(histogram_consistency([a, b, a])) == 2
    with pytest.raises(DegenerateMapError):
        histogram_consistency([a, np.ones((64, 64))])
    with pytest.raises(ValueError):
        histogram_consistency([a])


def test_linear_baseline_identity_and_ramp():
    img = np.random.default_rng(0).uniform(0, 255, (40, 30))
    assert np.array_equal(linear_scaling_baseline(img, 0.0), img)
    mask = np.zeros((64, 48), bool)
    mask[30:45, 10:30] = True
    gt = -make_axial_ramp_field(48, 64, 9.0)
    d = ramp_depth_from_gt(gt)
    assert d == pytest.approx(9.0)
    deformed = deform_mask(mask, gt)
    assert dice(mask, deformed) < 80
    assert dice(mask, correct_mask(deformed, linear_scaling_field(48, 64, d))) >= 95


def test_evaluate_run_oracle_and_identity(tiny_dataset, tmp_path):
    oracle = evaluate_run(tiny_dataset, oracle_predictor, split="train", out_dir=tmp_path / "o")
    for b in oracle.bins():
        assert oracle.get(b, "epe_mean")[0] == 0.0
        assert oracle.get(b, "dice_corrected")[0] >= 95
        assert oracle.get(b, "va_corrected")[0] >= 0.99
    ident = evaluate_run(tiny_dataset, identity_predictor, split="train")
    for row in ident.rows:
        assert row["dice_corrected"] == pytest.approx(row["dice_deformed"])
        assert row["va_corrected"] == pytest.approx(row["va_deformed"])
        assert row["ncc_corrected"] == pytest.approx(row["ncc_deformed"])
        assert row["per10"] >= row["per15"] >= row["per20"]


def test_report_files(tiny_dataset, tmp_path):
    evaluate_run(tiny_dataset, baseline_predictor, split="train", out_dir=tmp_path)
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["force_bin", "metric", "mean", "sd", "n"]
    assert {"epe_mean", "dice_corrected", "ha_corrected", "per20"} <= {r["metric"] for r in rows}
    maps = sorted((tmp_path / "error_maps").glob("*.ppm"))
    assert len(maps) == len(tiny_dataset.split("train"))
    assert io.read_ppm(maps[0]).shape == (64, 32, 3)


def test_missing_annotations_skip_metrics(tiny_dataset, caplog):
    import dataclasses
    recs = [dataclasses.replace(r, mask_path=None, interfaces_path=None)
            for r in tiny_dataset.split("test")]
    manifest = dataclasses.replace(tiny_dataset, records=recs)
    report = evaluate_run(manifest, identity_predictor, split="test")
    assert "dice_corrected" not in report.rows[0] and "epe_mean" in report.rows[0]
    assert "no mask" in caplog.text


def test_empty_split_is_an_error(tiny_dataset):
    with pytest.raises(ValueError):
        evaluate_run(tiny_dataset, identity_predictor, split="nope")
