from __future__ import annotations

import numpy as np
import pytest

from lanegate.controller import (
    ControllerConfig,
    SimulationTrace,
    TrajectoryTracker,
    max_deviation,
    track_trajectories,
    track_trajectory,
)
from lanegate.maneuvers import ManeuverParams, ReferenceTrajectory, generate_lane_change
from lanegate.plant import (
    TORQUE_MAX,
    ActuatorCommand,
    DegradationSet,
    PlantConfig,
    VehicleState,
    step,
)

from helpers import straight_segment

PC = PlantConfig()
CC = ControllerConfig()


def constant_speed_reference(seg, speed=13.0, duration=3.0, dt=0.02):
    """Reference equal to undisturbed coasting: no lateral move, no speed change."""
    n = round(duration / dt)
    t = np.arange(n + 1) * dt
    v = np.full(n + 1, speed)
    zeros = np.zeros(n + 1)
    return ReferenceTrajectory(dt=dt, t=t, s=v * t, v=v, ax=zeros, ay=zeros,
                               psi=zeros, psidot=zeros, d=zeros,
                               duration=duration, lane_offset=0.0, segment=seg)


def equilibrium_window(speed, h=CC.horizon_steps, dt=CC.control_dt):
    times = np.arange(1, h + 1) * dt
    window = np.zeros((h, 3))
    window[:, 0] = speed * times
    return window


def test_equilibrium_solve_returns_near_zero_command():
    tracker = TrajectoryTracker(DegradationSet.nominal(), PC, CC)
    state = VehicleState(vx=13.0)
    cmd = tracker.solve_step(state, equilibrium_window(13.0))
    assert np.allclose(cmd.torque, 0.0, atol=1e-9)
    assert np.allclose(cmd.steer_rate, 0.0, atol=1e-9)


def test_all_zero_degradation_forces_exact_zero_command():
    deg = DegradationSet(np.zeros(4), np.zeros(4), np.zeros(4))
    tracker = TrajectoryTracker(deg, PC, CC)
    state = VehicleState(vx=13.0)
    # A demanding target cannot move the command out of the {0} feasible set.
    window = equilibrium_window(13.0) + np.array([5.0, 2.0, 0.2])
    cmd = tracker.solve_step(state, window)
    assert np.all(cmd.torque == 0.0)
    assert np.all(cmd.steer_rate == 0.0)


def test_torque_constraint_active_under_demanding_ramp():
    deg = DegradationSet(np.ones(4), np.ones(4), np.full(4, 0.1))
    tracker = TrajectoryTracker(deg, PC, CC)
    state = VehicleState(vx=13.0)
    h = CC.horizon_steps
    times = np.arange(1, h + 1) * CC.control_dt
    window = np.zeros((h, 3))
    window[:, 0] = 13.0 * times + 0.5 * 2.5 * times**2
    cmd = tracker.solve_step(state, window)
    bound = deg.torque * TORQUE_MAX
    assert np.any(np.abs(cmd.torque) == bound)
    assert np.all(np.abs(cmd.torque) <= bound)


def test_wrong_window_shape_rejected():
    tracker = TrajectoryTracker(DegradationSet.nominal(), PC, CC)
    with pytest.raises(ValueError, match="horizon"):
        tracker.solve_step(VehicleState(vx=13.0), np.zeros((3, 3)))


def test_free_motion_reference_tracked_tightly():
    seg = straight_segment()
    ref = constant_speed_reference(seg)
    trace = track_trajectory(ref, DegradationSet.nominal(), PC, CC)
    _, eps_lat, _ = max_deviation(trace)
    assert eps_lat <= 0.05
    assert not trace.diverged


def test_nominal_lane_change_quality_gate():
    seg = straight_segment(width=3.5)
    refs = [generate_lane_change(seg, ManeuverParams(v, v, a))
            for v, a in [(50.0, 3.0), (30.0, 1.0), (40.0, 5.0), (50.0, 1.5)]]
    degs = [DegradationSet.nominal()] * len(refs)
    traces, stats = track_trajectories(refs, degs, PC, CC)
    for trace in traces:
        _, eps_lat, _ = max_deviation(trace)
        assert eps_lat <= 0.5
    assert stats.max_torque_excess <= 0.0
    assert stats.max_rate_excess <= 0.0


def coasting_oracle(ref, plant_cfg):
    """Independent zero-command rollout compared against the reference profile."""
    state = VehicleState(vx=ref.v[0],
                         yaw_rate=float(ref.segment.curvature_at(0.0)) * ref.v[0])
    n = round((ref.duration + CC.settle_time) / plant_cfg.dt)
    worst = 0.0
    for i in range(n):
        kappa = float(ref.segment.curvature_at(state.s))
        state = step(state, ActuatorCommand.zero(), plant_cfg, kappa)
        t = (i + 1) * plant_cfg.dt
        d_ref = float(ref.sample_targets([t])[0, 1])
        worst = max(worst, abs(state.d - d_ref))
    return worst


def test_total_failure_matches_coasting_oracle():
    seg = straight_segment(width=3.5)
    ref = generate_lane_change(seg, ManeuverParams(45.0, 45.0, 3.0))
    dead = DegradationSet(np.zeros(4), np.zeros(4), np.zeros(4))
    trace = track_trajectory(ref, dead, PC, CC)
    _, eps_lat, _ = max_deviation(trace)
    oracle = coasting_oracle(ref, PC)
    assert abs(eps_lat - oracle) <= 0.10 * ref.lane_offset
    # An uncontrolled vehicle misses the whole lane offset on a straight road.
    assert eps_lat == pytest.approx(ref.lane_offset, rel=0.10)


def test_steering_failure_worse_than_nominal():
    seg = straight_segment(width=3.5)
    ref = generate_lane_change(seg, ManeuverParams(40.0, 40.0, 3.0))
    nominal = track_trajectory(ref, DegradationSet.nominal(), PC, CC)
    no_steer = DegradationSet(np.zeros(4), np.zeros(4), np.ones(4))
    failed = track_trajectory(ref, no_steer, PC, CC)
    assert max_deviation(failed)[1] > max_deviation(nominal)[1]


def test_deviation_definitions_recomputable():
    seg = straight_segment(width=3.5)
    ref = generate_lane_change(seg, ManeuverParams(40.0, 40.0, 2.0))
    trace = track_trajectory(ref, DegradationSet.nominal(), PC, CC)
    assert np.array_equal(trace.eps[:, 0], np.abs(trace.states[:, 0] - trace.ref[:, 0]))
    assert np.array_equal(trace.eps[:, 1], np.abs(trace.states[:, 1] - trace.ref[:, 1]))
    assert np.array_equal(trace.eps[:, 2], np.abs(trace.states[:, 2] - trace.ref[:, 2]))
    assert np.all(trace.eps >= 0.0)
    lengths = {len(trace.t), len(trace.ref), len(trace.states), len(trace.commands), len(trace.eps)}
    assert len(lengths) == 1


def test_max_deviation_matches_bruteforce():
    rng = np.random.default_rng(3)
    eps = rng.uniform(0.0, 2.0, (50, 3))
    trace = SimulationTrace(t=np.arange(50.0), ref=np.zeros((50, 3)),
                            states=np.zeros((50, 10)), commands=np.zeros((50, 8)),
                            eps=eps)
    got = max_deviation(trace)
    want = (max(eps[:, 0]), max(eps[:, 1]), max(eps[:, 2]))
    assert got == want
    series = SimulationTrace(t=np.arange(3.0), ref=np.zeros((3, 3)),
                             states=np.zeros((3, 10)), commands=np.zeros((3, 8)),
                             eps=np.array([[0.0, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.1, 0.0]]))
    assert max_deviation(series)[1] == 0.2


def test_zero_duration_reference_gives_empty_trace():
    seg = straight_segment()
    ref = constant_speed_reference(seg, duration=3.0)
    ref.duration = 0.0
    trace = track_trajectory(ref, DegradationSet.nominal(), PC, CC)
    assert len(trace) == 0
    assert trace.eps.shape == (0, 3)
    with pytest.raises(ValueError):
        max_deviation(trace)


def test_tracking_deterministic():
    seg = straight_segment(width=3.3)
    ref = generate_lane_change(seg, ManeuverParams(35.0, 35.0, 2.0))
    deg = DegradationSet(np.full(4, 0.7), np.full(4, 0.8), np.full(4, 0.9))
    a = track_trajectory(ref, deg, PC, CC)
    b = track_trajectory(ref, deg, PC, CC)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.commands, b.commands)
