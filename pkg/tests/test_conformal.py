from __future__ import annotations

import math

import numpy as np
import pytest

from lanegate.conformal import (
    CalibrationResult,
    apply_correction,
    calibrate,
    conformity_score,
    evaluate,
    intervals_batch,
    load_calibration,
    predict_interval,
    quantile_correction,
    save_calibration,
)


class StubModel:
    """Fixed-interval predictor; enough surface for calibrate/evaluate."""

    def __init__(self, lo=0.0, hi=0.0, alpha=0.1):
        self.lo, self.hi, self.alpha = lo, hi, alpha

    def predict_scaled(self, x):
        x = np.atleast_2d(x)
        out = np.empty((len(x), 2))
        out[:, 0] = self.lo
        out[:, 1] = self.hi
        return out

    def checksum(self):
        return "stub"


def test_conformity_score_cases():
    assert conformity_score(0.3, 0.1, 0.4) == pytest.approx(-0.1)
    assert conformity_score(0.7, 0.1, 0.4) == pytest.approx(0.3)
    assert conformity_score(0.1, 0.1, 0.4) == 0.0
    with pytest.raises(ValueError):
        conformity_score(0.0, 0.5, 0.4)
    # Negative iff strictly inside.
    rng = np.random.default_rng(2)
    y = rng.uniform(-1, 2, 500)
    s = conformity_score(y, 0.0, 1.0)
    assert np.array_equal(s < 0, (y > 0.0) & (y < 1.0))


def sort_oracle(scores, alpha):
    ordered = sorted(scores)
    k = math.ceil((len(scores) + 1) * (1 - alpha))
    if k > len(scores):
        return math.inf
    return ordered[k - 1]


def test_quantile_correction_examples():
    assert quantile_correction(np.arange(1.0, 10.0), 0.1) == 9.0
    assert quantile_correction(np.full(20, 3.3), 0.25) == 3.3
    assert quantile_correction(np.ones(4), 0.1) == math.inf


def test_quantile_correction_matches_sort_oracle():
    rng = np.random.default_rng(7)
    for _ in range(300):
        n = int(rng.integers(1, 500))
        alpha = float(rng.uniform(0.005, 0.5))
        scores = rng.normal(size=n)
        assert quantile_correction(scores, alpha) == sort_oracle(scores, alpha)


def test_quantile_correction_order_invariant_and_monotone():
    rng = np.random.default_rng(9)
    scores = rng.normal(size=100)
    q1 = quantile_correction(scores, 0.2)
    q2 = quantile_correction(rng.permutation(scores), 0.2)
    assert q1 == q2
    qs = [quantile_correction(scores, a) for a in (0.3, 0.2, 0.1, 0.05)]
    assert all(b >= a for a, b in zip(qs, qs[1:]))


def test_calibrate_stub_model():
    model = StubModel(lo=0.0, hi=0.0, alpha=0.1)
    y = np.arange(1.0, 10.0)
    calib = calibrate(model, np.zeros((9, 19)), y)
    # Scores equal the labels here; k = ceil(10 * 0.9) = 9.
    assert calib.q_correction == 9.0
    assert calib.n_cal == 9
    assert not calib.unbounded
    with pytest.raises(ValueError):
        calibrate(model, np.zeros((9, 19)), y, alpha=0.2)
    with pytest.raises(ValueError):
        calibrate(model, np.zeros((0, 19)), np.array([]))


def test_small_sample_gives_unbounded_interval():
    model = StubModel(alpha=0.1)
    calib = calibrate(model, np.zeros((4, 19)), np.ones(4))
    assert calib.unbounded
    iv = predict_interval(model, calib, np.zeros(19))
    assert iv.lo == 0.0 and math.isinf(iv.hi)
    assert iv.unbounded


def test_interval_arithmetic():
    lo, hi = apply_correction(0.10, 0.20, 0.05)
    assert (lo, hi) == (0.05, 0.25)
    lo, hi = apply_correction(0.02, 0.04, -0.01)
    assert lo == pytest.approx(0.03) and hi == pytest.approx(0.03)
    # Strong negative corrections stay ordered and floored.
    lo, hi = apply_correction(0.02, 0.04, -0.05)
    assert lo <= hi and lo >= 0.0
    lo, hi = apply_correction(0.01, 0.02, 0.005)
    assert lo == pytest.approx(0.005) and hi == pytest.approx(0.025)
    lo, hi = apply_correction(0.01, 0.02, -0.02)
    assert lo >= 0.0


def test_evaluate_manual_oracle():
    model = StubModel(lo=1.0, hi=2.0, alpha=0.2)
    calib = CalibrationResult(alpha=0.2, q_correction=0.5, n_cal=10,
                              score_summary={}, model_id="stub")
    y = np.array([0.4, 0.6, 1.0, 2.4, 3.0])
    report = evaluate(model, calib, np.zeros((5, 19)), y)
    # Interval [0.5, 2.5]: covers 0.6, 1.0, 2.4 -> 3/5.
    assert report.empirical_coverage == pytest.approx(0.6)
    assert report.n_test == 5
    assert report.interval_length_m["mean"] == pytest.approx(2.0)
    over = np.array([2.5 - 0.6, 2.5 - 1.0, 2.5 - 2.4])
    assert report.overestimation_m["mean"] == pytest.approx(over.mean())
    assert report.overestimation_m["median"] == pytest.approx(np.median(over))
    assert min(over) >= 0.0


def test_full_coverage_report():
    model = StubModel(lo=0.0, hi=10.0, alpha=0.1)
    calib = CalibrationResult(alpha=0.1, q_correction=0.0, n_cal=50,
                              score_summary={}, model_id="stub")
    y = np.linspace(0.1, 9.9, 40)
    report = evaluate(model, calib, np.zeros((40, 19)), y)
    assert report.empirical_coverage == 1.0


def test_marginal_coverage_over_repeated_splits():
    # Split-conformal guarantee holds for any fixed predictor on exchangeable
    # data; average empirical coverage over seeded splits must reach 1 - alpha
    # within binomial noise.
    alpha = 0.1
    model = StubModel(lo=0.2, hi=0.5, alpha=alpha)
    rng = np.random.default_rng(123)
    coverages = []
    n_cal, n_test = 120, 120
    for _ in range(60):
        y = rng.exponential(0.4, n_cal + n_test)
        calib = calibrate(model, np.zeros((n_cal, 19)), y[:n_cal])
        report = evaluate(model, calib, np.zeros((n_test, 19)), y[n_cal:])
        coverages.append(report.empirical_coverage)
    mean_cov = float(np.mean(coverages))
    stderr = math.sqrt(alpha * (1 - alpha) / (60 * n_test))
    assert mean_cov >= 1.0 - alpha - 2.0 * stderr


def test_intervals_batch_matches_single():
    model = StubModel(lo=0.1, hi=0.3, alpha=0.1)
    calib = CalibrationResult(alpha=0.1, q_correction=0.07, n_cal=30,
                              score_summary={}, model_id="stub")
    xs = np.zeros((4, 19))
    batch = intervals_batch(model, calib, xs)
    for i in range(4):
        iv = predict_interval(model, calib, xs[i])
        assert (iv.lo, iv.hi) == (batch[i, 0], batch[i, 1])


def test_calibration_roundtrip(tmp_path):
    calib = CalibrationResult(alpha=0.05, q_correction=0.123, n_cal=400,
                              score_summary={"min": -0.2, "median": 0.0,
                                             "p90": 0.1, "max": 0.4},
                              model_id="deadbeef")
    path = tmp_path / "calibration.json"
    save_calibration(calib, path, extra={"dataset_hash": "x"})
    loaded, payload = load_calibration(path)
    assert loaded == calib
    assert payload["dataset_hash"] == "x"
