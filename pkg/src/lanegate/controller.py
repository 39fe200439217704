"""Receding-horizon tracking controller with degradation-aware box constraints.

The solver is a budgeted projected-gradient method on the horizon command
sequence: commands are normalized by the nominal actuator limits, gradients
come from forward finite differences of batched shooting rollouts, and every
iterate is projected onto the degraded box, so emitted commands satisfy the
degraded bounds exactly.  One solver instance drives a whole batch of
independent simulations in lockstep; warm starts and per-simulation step
sizes carry over between control steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .maneuvers import ReferenceTrajectory
from .plant import (
    GRAVITY,
    STATE_DIM,
    STEER_ANGLE_MAX,
    STEER_RATE_MAX,
    TORQUE_MAX,
    ActuatorCommand,
    BatchCurvature,
    DegradationSet,
    PlantConfig,
    VehicleState,
    _rhs,
    apply_degradation_arrays,
    step_arrays,
)


@dataclass(frozen=True)
class ControllerConfig:
    """Horizon, weights, and optimizer budget of the tracking controller."""

    horizon_steps: int = 20
    control_dt: float = 0.05
    w_long: float = 1.0
    w_lat: float = 10.0
    w_yaw: float = 5.0
    w_effort: float = 1e-4
    iterations: int = 8
    blocks: int = 1              # constant-command blocks over the horizon
    fd_step: float = 1e-3        # normalized finite-difference step
    step_init: float = 0.2      # initial normalized projected-gradient step
    settle_time: float = 1.0     # s, recorded tail after the reference ends
    prediction: str = "euler"    # internal shooting integrator: euler | rk4

    def __post_init__(self):
        if self.horizon_steps < 5:
            raise ValueError("horizon must cover at least 5 steps")
        if min(self.w_long, self.w_lat, self.w_yaw, self.w_effort) < 0.0 or self.w_lat <= 0.0:
            raise ValueError("weights must be nonnegative with positive lateral weight")
        if self.blocks < 1 or self.blocks > self.horizon_steps:
            raise ValueError("blocks must lie in [1, horizon_steps]")
        if self.prediction not in ("euler", "rk4"):
            raise ValueError("prediction integrator must be 'euler' or 'rk4'")


@dataclass(eq=False)
class SimulationTrace:
    """Closed-loop record on the plant time grid.

    ``ref`` columns are the tracked targets (s*, d*, psi*); ``states`` rows use
    the plant layout; ``commands`` columns are the applied per-wheel torques
    and steering rates; ``eps`` columns are the longitudinal, lateral, and yaw
    deviation magnitudes.
    """

    t: np.ndarray
    ref: np.ndarray
    states: np.ndarray
    commands: np.ndarray
    eps: np.ndarray
    diverged: bool = False

    def __len__(self):
        return len(self.t)

    @property
    def eps_long(self):
        return self.eps[:, 0]

    @property
    def eps_lat(self):
        return self.eps[:, 1]

    @property
    def eps_yaw(self):
        return self.eps[:, 2]


def max_deviation(trace: SimulationTrace):
    """Componentwise maxima (eps_long, eps_lat, eps_yaw) over the trace grid."""
    if len(trace) == 0:
        raise ValueError("empty trace has no deviation maxima")
    m = trace.eps.max(axis=0)
    return float(m[0]), float(m[1]), float(m[2])


def _predict_step(state, torque, rate, plant_cfg, curv, dt, method):
    if method == "rk4":
        return step_arrays(state, torque, rate, plant_cfg, curv, dt=dt)
    deriv = _rhs(state, torque, rate, curv(state[:, 0]), plant_cfg)
    out = state + dt * deriv
    np.clip(out[:, 6:10], -STEER_ANGLE_MAX, STEER_ANGLE_MAX, out=out[:, 6:10])
    return out


@njit(cache=True)
def _rollout_costs_kernel(state0, z, block_of, targets,
                          deg_angle, deg_rate, deg_torque,
                          curv_table, curv_len,
                          dt, mass, yaw_inertia, lf, lr, half_track,
                          stiffness, force_limit, wheel_radius,
                          w_long, w_lat, w_yaw, w_effort):
    """Forward-Euler shooting costs of the horizon plan, one scalar per row.

    Mirrors the plant dynamics and degradation clamps exactly; fused per-row
    loops avoid array temporaries in the optimizer's hot path.
    """
    n = state0.shape[0]
    h = block_of.shape[0]
    m_nodes = curv_table.shape[1]
    costs = np.zeros(n)
    z_sl = 3.0 * force_limit / stiffness
    alpha_clip = math.radians(80.0)
    x_w = (lf, lf, -lr, -lr)
    y_w = (half_track, -half_track, half_track, -half_track)
    for i in range(n):
        s = state0[i, 0]
        d = state0[i, 1]
        psi = state0[i, 2]
        vx = state0[i, 3]
        vy = state0[i, 4]
        r = state0[i, 5]
        steer = np.empty(4)
        for w in range(4):
            steer[w] = state0[i, 6 + w]
        cost = 0.0
        for k in range(h):
            blk = block_of[k]
            sum_fx = 0.0
            sum_fy = 0.0
            moment = 0.0
            effort = 0.0
            rates = np.empty(4)
            for w in range(4):
                zt = z[i, blk, w]
                zr = z[i, blk, 4 + w]
                effort += zt * zt + zr * zr
                torque = zt * TORQUE_MAX
                t_bound = deg_torque[i, w] * TORQUE_MAX
                if torque > t_bound:
                    torque = t_bound
                elif torque < -t_bound:
                    torque = -t_bound
                rate = zr * STEER_RATE_MAX
                r_bound = deg_rate[i, w] * STEER_RATE_MAX
                if rate > r_bound:
                    rate = r_bound
                elif rate < -r_bound:
                    rate = -r_bound
                a_bound = deg_angle[i, w] * STEER_ANGLE_MAX
                hi = (a_bound - steer[w]) / dt
                if hi < 0.0:
                    hi = 0.0
                lo = (-a_bound - steer[w]) / dt
                if lo > 0.0:
                    lo = 0.0
                if rate > hi:
                    rate = hi
                elif rate < lo:
                    rate = lo
                rates[w] = rate
                vxi = vx - r * y_w[w]
                vyi = vy + r * x_w[w]
                if vxi < 0.5:
                    vxi = 0.5
                alpha = steer[w] - math.atan2(vyi, vxi)
                if alpha > alpha_clip:
                    alpha = alpha_clip
                elif alpha < -alpha_clip:
                    alpha = -alpha_clip
                tz = math.tan(alpha)
                if tz > z_sl:
                    tz = z_sl
                elif tz < -z_sl:
                    tz = -z_sl
                fy = (stiffness * tz
                      - stiffness * stiffness / (3.0 * force_limit) * tz * abs(tz)
                      + stiffness ** 3 / (27.0 * force_limit * force_limit) * tz ** 3)
                fx = torque / wheel_radius
                cos_d = math.cos(steer[w])
                sin_d = math.sin(steer[w])
                fxb = fx * cos_d - fy * sin_d
                fyb = fx * sin_d + fy * cos_d
                sum_fx += fxb
                sum_fy += fyb
                moment += x_w[w] * fyb - y_w[w] * fxb
            # Lane curvature lookup (clamped linear interpolation).
            pos = s / curv_len[i]
            if pos < 0.0:
                pos = 0.0
            elif pos > 1.0:
                pos = 1.0
            pos *= m_nodes - 1
            i0 = int(pos)
            if i0 > m_nodes - 2:
                i0 = m_nodes - 2
            frac = pos - i0
            kappa = curv_table[i, i0] * (1.0 - frac) + curv_table[i, i0 + 1] * frac
            denom = 1.0 - kappa * d
            if denom < 0.1:
                denom = 0.1
            cos_p = math.cos(psi)
            sin_p = math.sin(psi)
            s_dot = (vx * cos_p - vy * sin_p) / denom
            d_dot = vx * sin_p + vy * cos_p
            psi_dot = r - kappa * s_dot
            vx_dot = sum_fx / mass + r * vy
            vy_dot = sum_fy / mass - r * vx
            r_dot = moment / yaw_inertia
            s += dt * s_dot
            d += dt * d_dot
            psi += dt * psi_dot
            vx += dt * vx_dot
            vy += dt * vy_dot
            r += dt * r_dot
            for w in range(4):
                steer[w] += dt * rates[w]
                if steer[w] > STEER_ANGLE_MAX:
                    steer[w] = STEER_ANGLE_MAX
                elif steer[w] < -STEER_ANGLE_MAX:
                    steer[w] = -STEER_ANGLE_MAX
            e0 = s - targets[i, k, 0]
            e1 = d - targets[i, k, 1]
            e2 = psi - targets[i, k, 2]
            cost += w_long * e0 * e0 + w_lat * e1 * e1 + w_yaw * e2 * e2
            cost += w_effort * effort
        if math.isnan(cost) or math.isinf(cost):
            cost = np.inf
        costs[i] = cost
    return costs


class _BatchSolver:
    """Projected-gradient horizon optimizer over a batch of simulations."""

    def __init__(self, plant_cfg: PlantConfig, ctrl_cfg: ControllerConfig,
                 deg_angle, deg_rate, deg_torque, curvature):
        self.plant_cfg = plant_cfg
        self.cfg = ctrl_cfg
        self.batch = deg_angle.shape[0]
        self.deg = (deg_angle, deg_rate, deg_torque)
        self.curv = curvature
        h, blocks = ctrl_cfg.horizon_steps, ctrl_cfg.blocks
        self.block_of = np.minimum(np.arange(h) * blocks // h, blocks - 1)
        # Normalized box: torque channels 0..3, steering-rate channels 4..7.
        self.bounds = np.concatenate([deg_torque, deg_rate], axis=1)[:, None, :]
        self.dim = blocks * 8
        self.z = np.zeros((self.batch, blocks, 8))
        self.lr = np.full(self.batch, ctrl_cfg.step_init)
        reps = self.dim + 1
        self.stack_deg = tuple(np.tile(d, (reps, 1)) for d in self.deg)
        self.stack_curv = curvature.tiled(reps)
        self.stack_bounds = np.tile(self.bounds, (reps, 1, 1))

    def _rollout(self, state0, z, targets, deg, curv):
        """Shooting cost of command plan ``z`` from ``state0`` against ``targets``."""
        cfg = self.cfg
        pc = self.plant_cfg
        if cfg.prediction == "euler":
            return _rollout_costs_kernel(
                np.ascontiguousarray(state0), np.ascontiguousarray(z), self.block_of,
                np.ascontiguousarray(targets), deg[0], deg[1], deg[2],
                curv.table, curv.lengths, cfg.control_dt,
                pc.mass, pc.yaw_inertia, pc.lf, pc.lr, pc.track / 2.0,
                pc.cornering_stiffness, pc.friction * pc.mass * GRAVITY / 4.0,
                pc.wheel_radius, cfg.w_long, cfg.w_lat, cfg.w_yaw, cfg.w_effort)
        state = state0
        cost = np.zeros(state0.shape[0])
        for k in range(cfg.horizon_steps):
            cmd = z[:, self.block_of[k], :]
            torque = cmd[:, 0:4] * TORQUE_MAX
            rate = cmd[:, 4:8] * STEER_RATE_MAX
            torque, rate = apply_degradation_arrays(
                torque, rate, state[:, 6:10], deg[0], deg[1], deg[2], cfg.control_dt)
            state = _predict_step(state, torque, rate, self.plant_cfg, curv,
                                  cfg.control_dt, cfg.prediction)
            err = state[:, 0:3] - targets[:, k, :]
            cost += (cfg.w_long * err[:, 0]**2 + cfg.w_lat * err[:, 1]**2
                     + cfg.w_yaw * err[:, 2]**2)
            cost += cfg.w_effort * (cmd**2).sum(axis=1)
        return np.nan_to_num(cost, nan=np.inf, posinf=np.inf, neginf=np.inf)

    def solve(self, state, targets):
        """Refine the warm-started plan; returns the first-step (torque, rate) arrays."""
        cfg = self.cfg
        b = self.batch
        self.z = np.clip(self.z, -self.bounds, self.bounds)
        cost = self._rollout(state, self.z, targets, self.deg, self.curv)
        reps = self.dim + 1
        state_stack = np.tile(state, (reps, 1))
        targets_stack = np.tile(targets, (reps, 1, 1))
        bounds_flat = np.broadcast_to(self.bounds, self.z.shape).reshape(b, self.dim)
        for _ in range(cfg.iterations):
            z_stack = np.tile(self.z, (reps, 1, 1))
            flat = z_stack.reshape(reps, b, self.dim)
            # Probe inward at the upper bound so boundary coordinates keep a
            # usable derivative under the box projection.
            sign = np.where(self.z.reshape(b, self.dim) + cfg.fd_step <= bounds_flat,
                            1.0, -1.0)
            for j in range(self.dim):
                flat[j + 1, :, j] += sign[:, j] * cfg.fd_step
            costs = self._rollout(state_stack, z_stack.reshape(reps * b, cfg.blocks, 8),
                                  targets_stack.reshape(reps * b, *targets.shape[1:]),
                                  self.stack_deg, self.stack_curv).reshape(reps, b)
            grad = (costs[1:] - costs[0]) / (sign.T * cfg.fd_step)
            grad = grad.T.reshape(b, cfg.blocks, 8)
            gmax = np.abs(grad).max(axis=(1, 2), keepdims=True)
            step = self.lr[:, None, None] * grad / np.maximum(gmax, 1e-12)
            cand = np.clip(self.z - step, -self.bounds, self.bounds)
            cand_cost = self._rollout(state, cand, targets, self.deg, self.curv)
            better = cand_cost < cost - 1e-15
            self.z = np.where(better[:, None, None], cand, self.z)
            cost = np.where(better, cand_cost, cost)
            self.lr = np.clip(np.where(better, self.lr * 1.3, self.lr * 0.5),
                              1e-4, 1.0)
        first = self.z[:, 0, :]
        return first[:, 0:4] * TORQUE_MAX, first[:, 4:8] * STEER_RATE_MAX


class TrajectoryTracker:
    """Single-simulation receding-horizon controller with persistent warm start."""

    def __init__(self, deg: DegradationSet, plant_cfg: PlantConfig,
                 ctrl_cfg: ControllerConfig, curvature=0.0):
        curv = BatchCurvature.constant([float(curvature)])
        self._solver = _BatchSolver(plant_cfg, ctrl_cfg,
                                    deg.steer_angle[None, :], deg.steer_rate[None, :],
                                    deg.torque[None, :], curv)

    def solve_step(self, state: VehicleState, ref_window) -> ActuatorCommand:
        """One receding-horizon solve; ``ref_window`` is an (H, 3) target array."""
        window = np.asarray(ref_window, dtype=float)
        h = self._solver.cfg.horizon_steps
        if window.shape != (h, 3):
            raise ValueError(f"reference window must cover the horizon, want ({h}, 3)")
        torque, rate = self._solver.solve(state.to_array()[None, :], window[None, :, :])
        return ActuatorCommand(torque[0], rate[0])


@dataclass
class TrackingStats:
    """Aggregates over a batched tracking run."""

    n_sims: int = 0
    n_diverged: int = 0
    max_torque_excess: float = 0.0
    max_rate_excess: float = 0.0


def track_trajectories(refs, degs, plant_cfg: PlantConfig, ctrl_cfg: ControllerConfig):
    """Closed-loop tracking of several references under matching degradations.

    Returns (traces, stats).  All simulations advance in lockstep; finished or
    diverged ones are frozen.  Deviations follow the pointwise definitions
    eps_long = |s - s*|, eps_lat = |d - d*|, eps_yaw = |psi - psi*|.
    """
    if len(refs) != len(degs):
        raise ValueError("one degradation set per reference required")
    b = len(refs)
    if b == 0:
        return [], TrackingStats()
    dt_c = ctrl_cfg.control_dt
    substeps = round(dt_c / plant_cfg.dt)
    if abs(substeps * plant_cfg.dt - dt_c) > 1e-9 or substeps < 1:
        raise ValueError("control_dt must be an integer multiple of the plant dt")

    n_ctrl = np.array([math.ceil((ref.duration + ctrl_cfg.settle_time) / dt_c)
                       for ref in refs])
    n_max = int(n_ctrl.max())
    h = ctrl_cfg.horizon_steps

    times_ctrl = np.arange(1, n_max + h + 1) * dt_c
    targets_ctrl = np.stack([ref.sample_targets(times_ctrl) for ref in refs])
    np_rows = n_max * substeps + 1
    times_plant = np.arange(np_rows) * plant_cfg.dt
    targets_plant = np.stack([ref.sample_targets(times_plant) for ref in refs])

    deg_angle = np.stack([d.steer_angle for d in degs])
    deg_rate = np.stack([d.steer_rate for d in degs])
    deg_torque = np.stack([d.torque for d in degs])
    curvature = BatchCurvature([ref.segment for ref in refs])
    solver = _BatchSolver(plant_cfg, ctrl_cfg, deg_angle, deg_rate, deg_torque, curvature)

    state = np.zeros((b, STATE_DIM))
    v0 = np.array([ref.v[0] for ref in refs])
    state[:, 3] = v0
    state[:, 5] = curvature(np.zeros(b)) * v0

    rec_states = np.zeros((b, np_rows, STATE_DIM))
    rec_cmds = np.zeros((b, np_rows, 8))
    rec_states[:, 0] = state
    active = n_ctrl > 0
    diverged = np.zeros(b, dtype=bool)
    stats = TrackingStats(n_sims=b)

    for k in range(n_max):
        torque, rate = solver.solve(state, targets_ctrl[:, k:k + h])
        torque, rate = apply_degradation_arrays(
            torque, rate, state[:, 6:10], deg_angle, deg_rate, deg_torque, dt_c)
        stats.max_torque_excess = max(stats.max_torque_excess, float(
            (np.abs(torque) - deg_torque * TORQUE_MAX).max(initial=-np.inf)))
        stats.max_rate_excess = max(stats.max_rate_excess, float(
            (np.abs(rate) - deg_rate * STEER_RATE_MAX).max(initial=-np.inf)))
        row = k * substeps
        cmd8 = np.concatenate([torque, rate], axis=1)
        for i in range(substeps):
            new_state = step_arrays(state, torque, rate, plant_cfg, curvature)
            bad = ~np.isfinite(new_state).all(axis=1) | (np.abs(new_state[:, 1]) > 50.0)
            newly_diverged = active & bad
            diverged |= newly_diverged
            active &= ~bad
            state = np.where(active[:, None], new_state, state)
            idx = row + i + 1
            write = active | newly_diverged
            rec_states[write, idx] = state[write]
            rec_cmds[write, idx] = cmd8[write]
        active &= (k + 1) < n_ctrl

    stats.n_diverged = int(diverged.sum())
    traces = []
    for i in range(b):
        n_rows = n_ctrl[i] * substeps + 1
        sl = slice(0, n_rows)
        ref_cols = targets_plant[i, sl]
        st = rec_states[i, sl]
        eps = np.abs(np.stack([st[:, 0] - ref_cols[:, 0],
                               st[:, 1] - ref_cols[:, 1],
                               st[:, 2] - ref_cols[:, 2]], axis=1))
        traces.append(SimulationTrace(t=times_plant[sl].copy(), ref=ref_cols.copy(),
                                      states=st.copy(), commands=rec_cmds[i, sl].copy(),
                                      eps=eps, diverged=bool(diverged[i])))
    return traces, stats


def track_trajectory(ref: ReferenceTrajectory, deg: DegradationSet,
                     plant_cfg: PlantConfig, ctrl_cfg: ControllerConfig) -> SimulationTrace:
    """Closed-loop rollout of a single reference; see ``track_trajectories``."""
    if ref.duration == 0.0:
        empty = np.zeros((0,))
        return SimulationTrace(t=empty, ref=np.zeros((0, 3)), states=np.zeros((0, STATE_DIM)),
                               commands=np.zeros((0, 8)), eps=np.zeros((0, 3)))
    traces, _ = track_trajectories([ref], [deg], plant_cfg, ctrl_cfg)
    return traces[0]
