"""Lane-change maneuver sampling and time-minimal reference generation.

The reference planner uses a point-mass model: the lateral offset follows a
rest-to-rest quintic polynomial, the longitudinal speed ramps between the
commanded endpoint speeds using whatever acceleration remains inside the
combined limit sqrt(ax^2 + ay^2) <= a_max, and the duration is minimized by
bisection over the feasibility boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .roads import RoadSegment

def kmh_to_mps(v):
    return v / 3.6

V_INIT_RANGE = (30.0, 50.0)   # km/h
V_END_RANGE = (30.0, 50.0)    # km/h
A_MAX_RANGE = (1.0, 5.0)      # m/s^2

# Peak of the normalized quintic second derivative 60u - 180u^2 + 120u^3
# on [0, 1]; attained at u = (3 - sqrt(3)) / 6.  Equals 10 / sqrt(3).
QUINTIC_PEAK_ACCEL_COEFF = 10.0 / math.sqrt(3.0)

REF_DT = 0.02                 # s, target sampling step of emitted references
DURATION_TOL = 1e-3           # s, bisection tolerance on the minimal duration
MAX_DURATION = 60.0           # s, growth cap while searching for a feasible duration

TRAJECTORY_CSV_HEADER = ["t_s", "s_m", "d_m", "v_mps", "ax_mps2", "ay_mps2", "psi_rad", "psidot_radps"]


class InfeasibleManeuver(RuntimeError):
    """No trajectory satisfies the acceleration and segment-length limits."""


@dataclass(frozen=True)
class ManeuverParams:
    """Sampled lane-change inputs; direction and friction are fixed in this study."""

    v_init: float             # km/h
    v_end: float              # km/h
    a_max: float              # m/s^2
    direction: str = "left"
    mu: float = 1.0

    def __post_init__(self):
        if self.direction != "left":
            raise ValueError("only left lane changes are modeled")
        if self.mu != 1.0:
            raise ValueError("friction indicator is fixed to 1")


def sample_maneuver_params(rng: np.random.Generator, *, v_init_range=V_INIT_RANGE,
                           v_end_range=V_END_RANGE,
                           a_max_range=A_MAX_RANGE) -> ManeuverParams:
    """Draw maneuver parameters uniformly from their admissible ranges."""
    return ManeuverParams(
        v_init=rng.uniform(*v_init_range),
        v_end=rng.uniform(*v_end_range),
        a_max=rng.uniform(*a_max_range),
    )


def resolve_lane_offset(segment: RoadSegment) -> float:
    """Distance between the current and adjacent lane centers for the maneuver.

    The lane-center spacing equals the lane width; the mid-segment value of
    the linear width profile is used as the representative offset.
    """
    return float(segment.width_at(segment.length / 2.0))


@dataclass(eq=False)
class ReferenceTrajectory:
    """Planned states of a lane change on a fixed-step time grid."""

    dt: float
    t: np.ndarray
    s: np.ndarray
    v: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    psi: np.ndarray
    psidot: np.ndarray
    d: np.ndarray              # lateral offset from the current-lane center
    duration: float
    lane_offset: float
    segment: RoadSegment

    def sample_targets(self, times):
        """Tracking targets (s*, d*, psi*) at arbitrary times, held past the end."""
        times = np.asarray(times, dtype=float)
        tail = np.clip(times - self.duration, 0.0, None)
        s = np.interp(times, self.t, self.s) + tail * self.v[-1]
        d = np.interp(times, self.t, self.d)
        psi = np.interp(times, self.t, self.psi)
        return np.stack([s, d, psi], axis=-1)

    def speed_at(self, times):
        return np.interp(times, self.t, self.v)


def _quintic_profiles(w, t, duration):
    u = t / duration
    d = w * (10.0 * u**3 - 15.0 * u**4 + 6.0 * u**5)
    dd = w / duration * (30.0 * u**2 - 60.0 * u**3 + 30.0 * u**4)
    ddd = w / duration**2 * (60.0 * u - 180.0 * u**2 + 120.0 * u**3)
    return d, dd, ddd


def _cumtrapz(y, dt):
    return np.concatenate(([0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * dt)))


def _solve_ramp_level(budget, dt, dv_abs):
    """Level c with trapezoid(min(c, budget)) == dv_abs; None if unattainable."""
    if np.trapezoid(budget, dx=dt) < dv_abs:
        return None
    lo, hi = 0.0, float(budget.max())
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.trapezoid(np.minimum(mid, budget), dx=dt) < dv_abs:
            lo = mid
        else:
            hi = mid
    return hi


def _build_profiles(segment, params, w, duration, dt_target):
    """Speed/offset profiles for one candidate duration; None if infeasible."""
    n = max(2, round(duration / dt_target))
    dt = duration / n
    t = np.arange(n + 1) * dt
    d, dd, ddd = _quintic_profiles(w, t, duration)
    v0 = kmh_to_mps(params.v_init)
    v1 = kmh_to_mps(params.v_end)
    dv = v1 - v0
    a_max = params.a_max

    v = np.linspace(v0, v1, n + 1)
    s = _cumtrapz(v, dt)
    ax = np.zeros(n + 1)
    # The road-curvature term couples ay to the speed profile; iterate the
    # construction to a fixed point (contraction factor ~ |kappa| v T << 1).
    for _ in range(6):
        ay = ddd + segment.curvature_at(s) * v**2
        if abs(dv) < 1e-12:
            ax = np.zeros(n + 1)
        else:
            budget = np.sqrt(np.clip(a_max**2 - ay**2, 0.0, None))
            level = _solve_ramp_level(budget, dt, abs(dv))
            if level is None:
                return None
            ax = math.copysign(1.0, dv) * np.minimum(level, budget)
        v = v0 + _cumtrapz(ax, dt)
        s = _cumtrapz(v, dt)
    ay = ddd + segment.curvature_at(s) * v**2
    if np.hypot(ax, ay).max() > a_max + 1e-9:
        return None
    v[-1] = v1
    return t, dt, d, dd, ddd, v, s, ax, ay


def generate_lane_change(segment: RoadSegment, params: ManeuverParams,
                         dt: float = REF_DT,
                         duration_tol: float = DURATION_TOL) -> ReferenceTrajectory:
    """Minimal-duration lane-change reference on ``segment`` under ``params``.

    Raises ``InfeasibleManeuver`` when no duration satisfies the acceleration
    limit together with the available segment length.
    """
    w = resolve_lane_offset(segment)
    t_lo = 0.5 * math.sqrt(QUINTIC_PEAK_ACCEL_COEFF * w / params.a_max)
    t_hi = 2.0 * t_lo
    while _build_profiles(segment, params, w, t_hi, dt) is None:
        t_hi *= 1.4
        if t_hi > MAX_DURATION:
            raise InfeasibleManeuver(
                f"no feasible duration below {MAX_DURATION} s for a_max={params.a_max}")
    while t_hi - t_lo > duration_tol:
        mid = 0.5 * (t_lo + t_hi)
        if _build_profiles(segment, params, w, mid, dt) is None:
            t_lo = mid
        else:
            t_hi = mid
    duration = t_hi
    t, dt_eff, d, dd, ddd, v, s, ax, ay = _build_profiles(segment, params, w, duration, dt)
    if s[-1] > segment.length:
        raise InfeasibleManeuver(
            f"maneuver needs {s[-1]:.1f} m but segment offers {segment.length:.1f} m")
    psi = np.arctan2(dd, v)
    psidot = (ddd * v - dd * ax) / (v**2 + dd**2)
    return ReferenceTrajectory(dt=dt_eff, t=t, s=s, v=v, ax=ax, ay=ay,
                               psi=psi, psidot=psidot, d=d, duration=duration,
                               lane_offset=w, segment=segment)


def export_trajectory_csv(ref: ReferenceTrajectory, path):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_CSV_HEADER)
        for i in range(len(ref.t)):
            writer.writerow([repr(float(col[i])) for col in
                             (ref.t, ref.s, ref.d, ref.v, ref.ax, ref.ay, ref.psi, ref.psidot)])
