"""Maneuver feasibility gate against the free lateral space of a segment.

A candidate lane change is admissible when the calibrated upper bound of its
predicted maximum lateral deviation fits inside the free lateral space
(worst case: the deviation peak coincides with the narrowest part of the
segment).  A stop-in-lane fallback is always appended as an out-of-model
option so the gate never returns an empty action set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conformal import CalibrationResult, PredictionInterval, predict_interval
from .dataset import build_features, features_outside_ranges
from .maneuvers import ManeuverParams
from .plant import DegradationSet
from .roads import RoadSegment

KIND_LANE_CHANGE = "lane_change"
KIND_STOP = "stop"


@dataclass
class SceneContext:
    """Snapshot of the situation a maneuver decision is made in."""

    segment: RoadSegment
    vehicle_width: float         # m
    speed_kmh: float
    degradation: DegradationSet

    def __post_init__(self):
        if self.vehicle_width >= self.segment.w_min:
            raise ValueError(
                f"vehicle width {self.vehicle_width} m does not fit the minimum "
                f"lane width {self.segment.w_min} m; no maneuver is assessable")


@dataclass
class ActionAssessment:
    """Feasibility verdict for one candidate action."""

    kind: str
    params: ManeuverParams | None
    interval: PredictionInterval | None
    eps_free: float
    margin: float | None
    feasible: bool
    warnings: list = field(default_factory=list)


def free_lateral_space(w_min: float, w_veh: float) -> float:
    """Per-side lateral clearance (w_min - w_veh) / 2 at the narrowest point."""
    if w_veh > w_min:
        raise ValueError(f"vehicle width {w_veh} m exceeds lane width {w_min} m")
    return (w_min - w_veh) / 2.0


def assess_action(scene: SceneContext, params: ManeuverParams, model,
                  calib: CalibrationResult) -> ActionAssessment:
    """Rate one lane-change candidate; ties (hi == eps_free) are feasible.

    Features outside the training value ranges add an extrapolation warning;
    the verdict is still computed.
    """
    features = build_features(scene.segment, params, scene.degradation)
    warnings = [f"extrapolation:{name}" for name in features_outside_ranges(features)]
    x_scaled = model.scaler.transform(features)
    interval = predict_interval(model, calib, x_scaled)
    eps_free = free_lateral_space(scene.segment.w_min, scene.vehicle_width)
    margin = eps_free - interval.hi
    return ActionAssessment(kind=KIND_LANE_CHANGE, params=params, interval=interval,
                            eps_free=eps_free, margin=margin,
                            feasible=interval.hi <= eps_free, warnings=warnings)


def stop_fallback(scene: SceneContext) -> ActionAssessment:
    """Always-available stop option; never rated by the predictor."""
    eps_free = free_lateral_space(scene.segment.w_min, scene.vehicle_width)
    return ActionAssessment(kind=KIND_STOP, params=None, interval=None,
                            eps_free=eps_free, margin=None, feasible=True)


def enumerate_admissible(scene: SceneContext, a_max_grid, model,
                         calib: CalibrationResult) -> list[ActionAssessment]:
    """Assess one lane change per acceleration-limit grid point.

    Lane-change candidates are sorted by descending margin (ties by smaller
    acceleration limit first); the stop fallback is appended last.
    """
    assessments = []
    for a_max in a_max_grid:
        params = ManeuverParams(v_init=scene.speed_kmh, v_end=scene.speed_kmh,
                                a_max=float(a_max))
        assessments.append(assess_action(scene, params, model, calib))
    assessments.sort(key=lambda a: (-a.margin, a.params.a_max))
    assessments.append(stop_fallback(scene))
    return assessments


def assessment_to_dict(a: ActionAssessment) -> dict:
    out = {
        "kind": a.kind,
        "eps_free_m": a.eps_free,
        "verdict": "feasible" if a.feasible else "infeasible",
        "warnings": list(a.warnings),
    }
    if a.kind == KIND_LANE_CHANGE:
        out.update({
            "a_max_mps2": a.params.a_max,
            "v_init_kmh": a.params.v_init,
            "v_end_kmh": a.params.v_end,
            "lo_m": a.interval.lo,
            "hi_m": None if a.interval.unbounded else a.interval.hi,
            "unbounded": a.interval.unbounded,
            "margin_m": None if a.interval.unbounded else a.margin,
        })
    return out
