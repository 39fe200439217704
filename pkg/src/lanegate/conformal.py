"""Split-conformal calibration of quantile intervals and coverage evaluation.

The finite-sample correction is the k-th smallest conformity score with
k = ceil((n + 1) * (1 - alpha)); added to both raw quantile heads it yields
intervals with guaranteed marginal coverage >= 1 - alpha on exchangeable
data.  Deviations are nonnegative, so calibrated intervals are floored at 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .qnet import QuantileModel


@dataclass(frozen=True)
class CalibrationResult:
    """Conformal correction for one (model, significance) pair."""

    alpha: float
    q_correction: float          # meters; +inf when the sample is too small
    n_cal: int
    score_summary: dict
    model_id: str = ""

    @property
    def unbounded(self):
        return math.isinf(self.q_correction)


@dataclass(frozen=True)
class PredictionInterval:
    """Calibrated deviation bound [lo, hi] at significance alpha."""

    lo: float
    hi: float
    alpha: float
    model_id: str = ""

    @property
    def unbounded(self):
        return math.isinf(self.hi)

    @property
    def length(self):
        return self.hi - self.lo


@dataclass(frozen=True)
class EvaluationReport:
    """Coverage and tightness statistics on a held-out test set."""

    alpha: float
    n_test: int
    empirical_coverage: float
    interval_length_m: dict      # q10 / median / mean / q90
    overestimation_m: dict       # same quantiles of hi - y over covered samples

    @property
    def desired_coverage(self):
        return 1.0 - self.alpha


def conformity_score(y, lo, hi):
    """CQR score max(lo - y, y - hi); negative iff y lies strictly inside."""
    y = np.asarray(y, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ValueError("interval bounds must satisfy lo <= hi")
    return np.maximum(lo - y, y - hi)


def quantile_correction(scores, alpha):
    """Finite-sample conformal quantile of a score sample.

    Returns the k-th smallest score with k = ceil((n + 1) * (1 - alpha)),
    or +inf when k exceeds the sample size.
    """
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    if n < 1:
        raise ValueError("empty calibration score set")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    k = math.ceil((n + 1) * (1.0 - alpha))
    if k > n:
        return math.inf
    return float(np.sort(scores)[k - 1])


def calibrate(model: QuantileModel, x_scaled, y, alpha=None) -> CalibrationResult:
    """Calibrate ``model`` on a held-out set (features already scaled)."""
    alpha = model.alpha if alpha is None else alpha
    if abs(alpha - model.alpha) > 1e-12:
        raise ValueError(f"alpha {alpha} does not match the model's {model.alpha}")
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty calibration set")
    preds = model.predict_scaled(x_scaled)
    scores = conformity_score(y, preds[:, 0], preds[:, 1])
    q = quantile_correction(scores, alpha)
    summary = {
        "min": float(scores.min()),
        "median": float(np.median(scores)),
        "p90": float(np.percentile(scores, 90)),
        "max": float(scores.max()),
    }
    return CalibrationResult(alpha=alpha, q_correction=q, n_cal=int(y.size),
                             score_summary=summary, model_id=model.checksum())


def apply_correction(lo, hi, q_correction):
    """Widen raw quantile bounds by the conformal correction; order and floor."""
    lo_c = lo - q_correction
    hi_c = hi + q_correction
    lo_out = np.minimum(lo_c, hi_c)
    hi_out = np.maximum(lo_c, hi_c)
    return np.maximum(lo_out, 0.0), np.maximum(hi_out, 0.0)


def predict_interval(model: QuantileModel, calib: CalibrationResult,
                     x_scaled) -> PredictionInterval:
    """Calibrated interval for one scaled feature vector."""
    if abs(calib.alpha - model.alpha) > 1e-12:
        raise ValueError("calibration alpha does not match the model")
    if calib.unbounded:
        return PredictionInterval(lo=0.0, hi=math.inf, alpha=calib.alpha,
                                  model_id=calib.model_id)
    raw_lo, raw_hi = model.predict_scaled(np.asarray(x_scaled, dtype=float)[None, :])[0]
    lo, hi = apply_correction(raw_lo, raw_hi, calib.q_correction)
    return PredictionInterval(lo=float(lo), hi=float(hi), alpha=calib.alpha,
                              model_id=calib.model_id)


def intervals_batch(model: QuantileModel, calib: CalibrationResult, x_scaled):
    """Calibrated (n, 2) interval array for a scaled feature matrix."""
    preds = model.predict_scaled(x_scaled)
    if calib.unbounded:
        out = np.empty_like(preds)
        out[:, 0] = 0.0
        out[:, 1] = np.inf
        return out
    lo, hi = apply_correction(preds[:, 0], preds[:, 1], calib.q_correction)
    return np.stack([lo, hi], axis=1)


def _quartet(values):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return {"q10": math.nan, "median": math.nan, "mean": math.nan, "q90": math.nan}
    return {"q10": float(np.percentile(values, 10)),
            "median": float(np.median(values)),
            "mean": float(values.mean()),
            "q90": float(np.percentile(values, 90))}


def evaluate(model: QuantileModel, calib: CalibrationResult, x_scaled, y) -> EvaluationReport:
    """Empirical coverage, interval lengths, and upper-bound overestimation."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty test set")
    iv = intervals_batch(model, calib, x_scaled)
    covered = (y >= iv[:, 0]) & (y <= iv[:, 1])
    lengths = iv[:, 1] - iv[:, 0]
    over = iv[covered, 1] - y[covered]
    return EvaluationReport(alpha=calib.alpha, n_test=int(y.size),
                            empirical_coverage=float(covered.mean()),
                            interval_length_m=_quartet(lengths),
                            overestimation_m=_quartet(over))


def save_calibration(calib: CalibrationResult, path, extra=None):
    payload = {
        "alpha": calib.alpha,
        "q_correction_m": None if calib.unbounded else calib.q_correction,
        "unbounded": calib.unbounded,
        "n_cal": calib.n_cal,
        "score_summary": calib.score_summary,
        "model_id": calib.model_id,
    }
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_calibration(path) -> tuple[CalibrationResult, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"calibration file not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    q = math.inf if payload.get("unbounded") else float(payload["q_correction_m"])
    calib = CalibrationResult(alpha=payload["alpha"], q_correction=q,
                              n_cal=payload["n_cal"],
                              score_summary=payload.get("score_summary", {}),
                              model_id=payload.get("model_id", ""))
    return calib, payload


def save_report(report: EvaluationReport, path, extra=None):
    payload = {
        "alpha": report.alpha,
        "desired_coverage": report.desired_coverage,
        "empirical_coverage": report.empirical_coverage,
        "n_test": report.n_test,
        "interval_length_m": report.interval_length_m,
        "overestimation_m": report.overestimation_m,
    }
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
