import json

import numpy as np
import pytest

from lotr.metrics import MetricsReport, evaluate, nme, norm_factor


def trapezoid_auc(nmes, threshold, points=10 ** 6):
    """Numerical-integration oracle for the CED area."""
    errs = np.asarray(nmes)
    xs = np.linspace(0.0, threshold, points)
    ced = (errs[None, :] <= xs[:, None]).mean(axis=1)
    return float(np.trapezoid(ced, xs) / threshold)


def test_nme_zero_and_hand_case():
    z = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert nme(z, z, 10.0) == 0.0
    pred = z + np.array([[0.3, 0.0], [0.0, 0.4]])
    assert nme(z, pred, 1.0) == pytest.approx(0.35, abs=1e-12)


def test_nme_scale_invariance():
    rng = np.random.Generator(np.random.Philox(key=60))
    z = rng.uniform(0, 96, size=(10, 2))
    pred = z + rng.normal(size=(10, 2))
    assert nme(7 * z, 7 * pred, 7 * 5.0) == pytest.approx(nme(z, pred, 5.0), rel=1e-14)


def test_nme_validation():
    z = np.zeros((3, 2))
    with pytest.raises(ValueError):
        nme(z, z, 0.0)
    with pytest.raises(ValueError):
        nme(z, np.zeros((4, 2)), 1.0)


def test_norm_factor_bbox_geomean():
    pts = np.array([[0.0, 0.0], [100.0, 0.0], [50.0, 64.0]])
    assert norm_factor(pts) == pytest.approx(80.0, abs=1e-12)


def test_norm_factor_inter_ocular():
    pts = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
    assert norm_factor(pts, mode="inter-ocular", eye_indices=(0, 1)) == 5.0


def test_norm_factor_degenerate_cases():
    same = np.tile([[4.0, 4.0]], (5, 1))
    with pytest.raises(ValueError):
        norm_factor(same)
    with pytest.raises(ValueError):
        norm_factor(same, mode="inter-ocular", eye_indices=(0, 1))
    with pytest.raises(ValueError):
        norm_factor(same, mode="inter-ocular", eye_indices=(2, 2))
    with pytest.raises(ValueError):
        norm_factor(same, mode="nose")


def test_evaluate_edge_cases():
    report = evaluate([0.0, 0.0, 0.0], 0.08)
    assert report.auc == 1.0 and report.failure_rate == 0.0
    report = evaluate([0.2, 0.5], 0.08)
    assert report.auc == 0.0 and report.failure_rate == 1.0


def test_evaluate_single_image_half_auc():
    report = evaluate([0.04], 0.08)
    assert report.auc == 0.5
    assert report.failure_rate == 0.0


def test_evaluate_validation():
    with pytest.raises(ValueError):
        evaluate([], 0.08)
    with pytest.raises(ValueError):
        evaluate([0.1], 0.0)
    with pytest.raises(ValueError):
        evaluate([-0.1], 0.08)


def test_auc_matches_trapezoid_oracle():
    rng = np.random.Generator(np.random.Philox(key=61))
    for _ in range(20):
        n = int(rng.integers(1, 50))
        errs = rng.uniform(0, 0.2, size=n)
        threshold = float(rng.uniform(0.05, 0.15))
        report = evaluate(errs, threshold)
        assert report.auc == pytest.approx(trapezoid_auc(errs, threshold), abs=2e-6)


def test_auc_and_failure_monotone_in_errors():
    rng = np.random.Generator(np.random.Philox(key=62))
    errs = rng.uniform(0, 0.2, size=30)
    base = evaluate(errs, 0.08)
    for i in (0, 7, 29):
        better = errs.copy()
        better[i] *= 0.5
        rep = evaluate(better, 0.08)
        assert rep.auc >= base.auc
        assert rep.failure_rate <= base.failure_rate


def test_report_serialization(tmp_path):
    report = evaluate([0.01, 0.04, 0.1], 0.08)
    d = json.loads(report.to_json())
    assert d["count"] == 3
    assert d["failure_rate"] == pytest.approx(1.0 / 3.0)
    csv_path = tmp_path / "ced.csv"
    report.write_ced_csv(csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "nme_threshold,fraction"
    assert len(lines) == 1 + len(report.ced)
    last = lines[-1].split(",")
    assert float(last[1]) == 1.0
