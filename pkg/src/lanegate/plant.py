"""Planar double-track vehicle plant with per-wheel actuator degradations.

Each of the four wheels is individually steered and driven.  Lateral tire
forces follow a brush-type saturation law capped at the friction limit;
longitudinal force is wheel torque over radius.  The body states propagate
in a curvilinear frame attached to the current-lane centerline, so the
stored heading is relative to the local lane tangent.

All core routines operate on batched arrays (leading dimension = number of
independent simulations); thin scalar wrappers expose the single-vehicle
API.  State array layout, per row:

    [s, d, psi, vx, vy, yaw_rate, steer_fl, steer_fr, steer_rl, steer_rr]

with ``s``/``d`` the arc position and lateral offset against the lane
centerline and ``psi`` the heading error against the lane tangent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

GRAVITY = 9.81

# Nominal actuator limits (hard technical bounds before degradation).
STEER_ANGLE_MAX = math.radians(30.0)     # rad
STEER_RATE_MAX = math.radians(120.0)     # rad/s
TORQUE_MAX = 2000.0                      # N*m

WHEELS = ("fl", "fr", "rl", "rr")

STATE_DIM = 10
_S, _D, _PSI, _VX, _VY, _R = range(6)
_STEER = slice(6, 10)

_VX_GUARD = 0.5          # m/s, keeps slip angles defined at low speed
_ALPHA_CLIP = math.radians(80.0)


class SimulationDiverged(RuntimeError):
    """The integrated state left the finite/plausible range."""


@dataclass(frozen=True)
class PlantConfig:
    """Physical and numerical parameters of the simulated vehicle."""

    mass: float = 1800.0                 # kg
    yaw_inertia: float = 2500.0          # kg*m^2
    lf: float = 1.50                     # m, CoG to front axle
    lr: float = 1.50                     # m, CoG to rear axle
    track: float = 1.60                  # m
    vehicle_width: float = 1.96          # m
    cornering_stiffness: float = 60000.0  # N/rad per tire
    friction: float = 1.0
    wheel_radius: float = 0.31           # m
    dt: float = 0.01                     # s, integration step

    def __post_init__(self):
        for name in ("mass", "yaw_inertia", "lf", "lr", "track", "vehicle_width",
                     "cornering_stiffness", "friction", "wheel_radius", "dt"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"PlantConfig.{name} must be positive")
        if self.dt > 0.01:
            raise ValueError("integration dt must be <= 0.01 s")


@lru_cache(maxsize=8)
def _geometry(cfg: PlantConfig):
    x = np.array([cfg.lf, cfg.lf, -cfg.lr, -cfg.lr])
    y = np.array([cfg.track / 2, -cfg.track / 2, cfg.track / 2, -cfg.track / 2])
    wheel_load = cfg.mass * GRAVITY / 4.0
    return x, y, wheel_load


@dataclass
class VehicleState:
    """Scalar view of one vehicle's state."""

    s: float = 0.0
    d: float = 0.0
    psi: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    steer: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def to_array(self):
        out = np.empty(STATE_DIM)
        out[:6] = (self.s, self.d, self.psi, self.vx, self.vy, self.yaw_rate)
        out[6:] = self.steer
        return out

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float)
        return cls(s=float(arr[_S]), d=float(arr[_D]), psi=float(arr[_PSI]),
                   vx=float(arr[_VX]), vy=float(arr[_VY]), yaw_rate=float(arr[_R]),
                   steer=arr[_STEER].copy())


@dataclass
class ActuatorCommand:
    """Per-wheel torque and steering-rate command, FL/FR/RL/RR order."""

    torque: np.ndarray
    steer_rate: np.ndarray

    def __post_init__(self):
        self.torque = np.asarray(self.torque, dtype=float)
        self.steer_rate = np.asarray(self.steer_rate, dtype=float)
        if self.torque.shape != (4,) or self.steer_rate.shape != (4,):
            raise ValueError("commands carry one torque and one steering rate per wheel")

    @classmethod
    def zero(cls):
        return cls(np.zeros(4), np.zeros(4))


@dataclass
class DegradationSet:
    """Normalized per-wheel capability factors in [0, 1]; 1 = nominal, 0 = failed."""

    steer_angle: np.ndarray
    steer_rate: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        self.steer_angle = np.asarray(self.steer_angle, dtype=float)
        self.steer_rate = np.asarray(self.steer_rate, dtype=float)
        self.torque = np.asarray(self.torque, dtype=float)
        for name in ("steer_angle", "steer_rate", "torque"):
            arr = getattr(self, name)
            if arr.shape != (4,):
                raise ValueError(f"{name} needs one factor per wheel")
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise ValueError(f"{name} factors must lie in [0, 1]")

    @classmethod
    def nominal(cls):
        return cls(np.ones(4), np.ones(4), np.ones(4))

    def as_features(self):
        """Twelve factors in feature order: angle FL..RR, rate FL..RR, torque FL..RR."""
        return np.concatenate([self.steer_angle, self.steer_rate, self.torque])

    @classmethod
    def from_features(cls, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (12,):
            raise ValueError("expected 12 degradation factors")
        return cls(values[0:4], values[4:8], values[8:12])


def apply_degradation_arrays(torque, steer_rate, steer, deg_angle, deg_rate,
                             deg_torque, hold_dt):
    """Clamp batched commands to the degraded actuator bounds.

    ``steer`` is the current per-wheel steering angle; the rate is saturated
    so that holding it for ``hold_dt`` cannot move a wheel beyond its degraded
    angle bound (and never forces motion on its own).  Saturation instead of
    outright zeroing keeps the clamp monotone in every degradation factor.
    Returns new arrays; inputs are not modified.
    """
    t_bound = deg_torque * TORQUE_MAX
    r_bound = deg_rate * STEER_RATE_MAX
    a_bound = deg_angle * STEER_ANGLE_MAX
    torque = np.clip(torque, -t_bound, t_bound)
    steer_rate = np.clip(steer_rate, -r_bound, r_bound)
    rate_hi = np.maximum((a_bound - steer) / hold_dt, 0.0)
    rate_lo = np.minimum((-a_bound - steer) / hold_dt, 0.0)
    steer_rate = np.clip(steer_rate, rate_lo, rate_hi)
    return torque, steer_rate


def apply_degradation(cmd: ActuatorCommand, state: VehicleState, deg: DegradationSet,
                      hold_dt: float) -> ActuatorCommand:
    """Degradation clamp for a single command held for ``hold_dt`` seconds."""
    torque, rate = apply_degradation_arrays(
        cmd.torque, cmd.steer_rate, state.steer,
        deg.steer_angle, deg.steer_rate, deg.torque, hold_dt)
    return ActuatorCommand(torque, rate)


def brush_lateral_force(alpha, stiffness, force_limit):
    """Brush-model lateral tire force, saturating exactly at ``force_limit``."""
    z_sl = 3.0 * force_limit / stiffness
    z = np.tan(np.clip(alpha, -_ALPHA_CLIP, _ALPHA_CLIP))
    z = np.clip(z, -z_sl, z_sl)
    return (stiffness * z
            - stiffness**2 / (3.0 * force_limit) * z * np.abs(z)
            + stiffness**3 / (27.0 * force_limit**2) * z**3)


def _rhs(state, torque, steer_rate, kappa, cfg: PlantConfig):
    """Time derivative of the batched state under constant wheel commands."""
    x_w, y_w, wheel_load = _geometry(cfg)
    vx = state[:, _VX]
    vy = state[:, _VY]
    r = state[:, _R]
    steer = state[:, _STEER]

    vxi = vx[:, None] - r[:, None] * y_w
    vyi = vy[:, None] + r[:, None] * x_w
    alpha = steer - np.arctan2(vyi, np.maximum(vxi, _VX_GUARD))
    f_limit = cfg.friction * wheel_load
    fy_wheel = brush_lateral_force(alpha, cfg.cornering_stiffness, f_limit)
    fx_wheel = torque / cfg.wheel_radius

    cos_d = np.cos(steer)
    sin_d = np.sin(steer)
    fx_body = fx_wheel * cos_d - fy_wheel * sin_d
    fy_body = fx_wheel * sin_d + fy_wheel * cos_d

    sum_fx = fx_body.sum(axis=1)
    sum_fy = fy_body.sum(axis=1)
    moment = (x_w * fy_body - y_w * fx_body).sum(axis=1)

    psi = state[:, _PSI]
    d = state[:, _D]
    denom = np.maximum(1.0 - kappa * d, 0.1)
    cos_p = np.cos(psi)
    sin_p = np.sin(psi)
    s_dot = (vx * cos_p - vy * sin_p) / denom

    deriv = np.empty_like(state)
    deriv[:, _S] = s_dot
    deriv[:, _D] = vx * sin_p + vy * cos_p
    deriv[:, _PSI] = r - kappa * s_dot
    deriv[:, _VX] = sum_fx / cfg.mass + r * vy
    deriv[:, _VY] = sum_fy / cfg.mass - r * vx
    deriv[:, _R] = moment / cfg.yaw_inertia
    deriv[:, _STEER] = steer_rate
    return deriv


def step_arrays(state, torque, steer_rate, cfg: PlantConfig, curvature, dt=None):
    """One classical Runge-Kutta step of the batched plant.

    ``curvature`` is either a callable mapping arc positions (B,) to lane
    curvature (B,) or a constant array/scalar.  ``dt`` defaults to the
    configured integration step; the internal prediction model of the
    controller passes its own coarser step.
    """
    if dt is None:
        dt = cfg.dt
    if callable(curvature):
        kap = curvature
    else:
        const = np.broadcast_to(np.asarray(curvature, dtype=float), state.shape[:1])
        kap = lambda s: const
    k1 = _rhs(state, torque, steer_rate, kap(state[:, _S]), cfg)
    s2 = state + (dt / 2.0) * k1
    k2 = _rhs(s2, torque, steer_rate, kap(s2[:, _S]), cfg)
    s3 = state + (dt / 2.0) * k2
    k3 = _rhs(s3, torque, steer_rate, kap(s3[:, _S]), cfg)
    s4 = state + dt * k3
    k4 = _rhs(s4, torque, steer_rate, kap(s4[:, _S]), cfg)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    np.clip(out[:, _STEER], -STEER_ANGLE_MAX, STEER_ANGLE_MAX, out=out[:, _STEER])
    return out


def step(state: VehicleState, cmd: ActuatorCommand, cfg: PlantConfig,
         curvature: float) -> VehicleState:
    """Advance a single vehicle one integration step at constant lane curvature."""
    arr = step_arrays(state.to_array()[None, :], cmd.torque[None, :],
                      cmd.steer_rate[None, :], cfg, float(curvature))
    if not np.all(np.isfinite(arr)):
        raise SimulationDiverged("non-finite state after integration step")
    return VehicleState.from_array(arr[0])


class BatchCurvature:
    """Curvature lookup for a batch of simulations on (possibly) distinct segments."""

    NODES = 256

    def __init__(self, segments=None, *, lengths=None, table=None):
        if segments is not None:
            lengths = np.array([seg.length for seg in segments])
            table = np.empty((len(segments), self.NODES))
            for i, seg in enumerate(segments):
                grid = np.linspace(0.0, seg.length, self.NODES)
                table[i] = seg.curvature_at(grid)
        self.lengths = lengths
        self.table = table
        self._rows = np.arange(len(lengths))

    @classmethod
    def constant(cls, values):
        """Constant-curvature lookup, one value per batch row."""
        values = np.atleast_1d(np.asarray(values, dtype=float))
        return cls(lengths=np.ones(len(values)),
                   table=np.repeat(values[:, None], 2, axis=1))

    def tiled(self, reps):
        """Lookup view for a batch repeated ``reps`` times (stacked rollouts)."""
        return BatchCurvature(lengths=np.tile(self.lengths, reps),
                              table=np.tile(self.table, (reps, 1)))

    def __call__(self, s):
        nodes = self.table.shape[1]
        pos = np.clip(s / self.lengths, 0.0, 1.0) * (nodes - 1)
        i0 = np.minimum(pos.astype(int), nodes - 2)
        frac = pos - i0
        return self.table[self._rows, i0] * (1.0 - frac) + self.table[self._rows, i0 + 1] * frac
