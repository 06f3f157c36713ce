"""Planner, servo, structure synthesis and campaign generation tests.

The synthetic machine is what gives every pipeline stage an exact oracle,
so these tests lean on closed-form references: trapezoid algebra for the
feed profile, ODE integration for the servo, and hand-built formulas for
each injected error source.
"""

import filecmp
import json
import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from volerr.decomposition import decompose_files
from volerr.kinematics import (
    AXIS_NAMES,
    RAD_PER_DEG,
    dkt,
    dkt_batch,
    link_jacobian_batch,
)
from volerr.presets import (
    default_geometry,
    make_tracking_program,
    small_campaign_config,
    tracking_waypoint,
)
from volerr.signal_io import SignalSet, estimate_delay, load_signals
from volerr.virtual_machine import (
    BLEND_DEVIATION_FACTOR,
    PROGRAM_UNIT_SCALE,
    CampaignConfig,
    MotionTerm,
    ServoParams,
    StructureParams,
    TrajectoryProgram,
    _delayed,
    _smoothed_acceleration,
    plan_trajectory,
    run_campaign,
    servo_response,
    session_id_for_feed,
    simulate_session,
    synthesize_measurement,
)


def single_axis_program(length_mm, feed, amax_val=2000.0, **kwargs):
    pts = np.zeros((2, 5))
    pts[1, 0] = length_mm
    kwargs.setdefault("amax", np.full(5, amax_val))
    return TrajectoryProgram(points=pts, feed_mm_min=feed, **kwargs)


def pose_signalset(poses, rate_hz):
    poses = np.asarray(poses, dtype=float)
    return SignalSet(rate_hz=rate_hz, start_s=0.0, channels={
        name: poses[:, i].copy() for i, name in enumerate(AXIS_NAMES)})


class TestTrajectoryProgram:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrajectoryProgram(points=np.zeros((2, 4)), feed_mm_min=1000.0)
        with pytest.raises(ValueError):
            TrajectoryProgram(points=np.zeros((2, 5)), feed_mm_min=0.0)
        with pytest.raises(ValueError):
            TrajectoryProgram(points=np.zeros((2, 5)), feed_mm_min=1000.0,
                              corner_tolerance_units=-1.0)
        with pytest.raises(ValueError):
            TrajectoryProgram(points=np.zeros((2, 5)), feed_mm_min=1000.0,
                              vmax=np.zeros(5))

    def test_from_segments_checks_contiguity(self):
        a = np.zeros(5)
        b = np.array([10.0, 0, 0, 0, 0])
        c = np.array([10.0, 5.0, 0, 0, 0])
        prog = TrajectoryProgram.from_segments([(a, b), (b, c)],
                                               feed_mm_min=2000.0)
        assert prog.points.shape == (3, 5)
        with pytest.raises(ValueError, match="contiguous"):
            TrajectoryProgram.from_segments([(a, b), (a, c)],
                                            feed_mm_min=2000.0)

    def test_with_feed(self):
        prog = single_axis_program(50.0, 1000.0)
        faster = prog.with_feed(4000.0)
        assert faster.feed_mm_min == 4000.0
        assert prog.feed_mm_min == 1000.0
        assert np.array_equal(prog.points, faster.points)

    def test_dict_round_trip(self):
        pts = np.array([[0, 0, 0, 0, 0],
                        [12.5, -3.0, 4.0, 0.1, -0.2]], dtype=float)
        prog = TrajectoryProgram(points=pts, feed_mm_min=1234.0,
                                 corner_tolerance_units=0.05,
                                 tag_amplitude_mm=2.0, tag_duration_s=0.06,
                                 dwell_s=0.2)
        back = TrajectoryProgram.from_dict(prog.to_dict())
        assert np.allclose(back.points, pts, rtol=0, atol=1e-15)
        assert back.feed_mm_min == prog.feed_mm_min
        assert back.corner_tolerance_units == prog.corner_tolerance_units
        assert back.tag_amplitude_mm == prog.tag_amplitude_mm
        # on-disk representation keeps rotary columns in degrees
        d = prog.to_dict()
        assert d["points_mm_deg"][1][3] == pytest.approx(0.1 / RAD_PER_DEG)


class TestPlanTrajectory:
    def test_single_axis_trapezoid_closed_form(self):
        # 120 mm at 6000 mm/min with a = 2000: ramp 2.5 mm / 0.05 s each
        # side, cruise 115 mm at 100 mm/s
        prog = single_axis_program(120.0, 6000.0, amax_val=2000.0)
        sig = plan_trajectory(prog, nc_cycle_s=0.003)
        t = sig.times()
        t0 = prog.dwell_s + prog.tag_duration_s + prog.dwell_s
        v, a = 100.0, 2000.0
        t_acc = v / a
        d_acc = v ** 2 / (2 * a)
        t_cruise = (120.0 - 2 * d_acc) / v

        def s_ref(tp):
            if tp <= 0.0:
                return 0.0
            if tp < t_acc:
                return 0.5 * a * tp ** 2
            if tp < t_acc + t_cruise:
                return d_acc + v * (tp - t_acc)
            if tp < 2 * t_acc + t_cruise:
                dt = tp - t_acc - t_cruise
                return d_acc + v * t_cruise + v * dt - 0.5 * a * dt ** 2
            return 120.0

        expect = np.array([s_ref(ti - t0) for ti in t])
        mask = t >= prog.dwell_s + prog.tag_duration_s  # skip the tag bump
        assert np.max(np.abs(sig.channels["X"][mask] - expect[mask])) < 1e-9
        for name in ("Y", "Z", "A", "C"):
            assert np.all(sig.channels[name] == 0.0)

    def test_peak_velocity_capped_by_axis_limit(self):
        # F/60 = 1000 mm/s exceeds the 500 mm/s axis limit
        prog = single_axis_program(200.0, 60000.0, amax_val=50000.0)
        sig = plan_trajectory(prog, nc_cycle_s=0.003)
        rates = np.diff(sig.channels["X"]) / 0.003
        assert np.max(rates) == pytest.approx(500.0, rel=1e-9)

        slow = single_axis_program(200.0, 6000.0, amax_val=50000.0)
        rates = np.diff(plan_trajectory(slow, 0.003).channels["X"]) / 0.003
        assert np.max(rates) == pytest.approx(100.0, rel=1e-9)

    def test_endpoints_and_dwells(self):
        geom = default_geometry()
        prog = make_tracking_program(geom, 9000.0,
                                     a_deg=[0.0, 2.0, 4.0],
                                     c_deg=[0.0, 3.0, 6.0])
        sig, profile = plan_trajectory(prog, 0.003, return_profile=True)
        poses = sig.joint_matrix()
        t = sig.times()
        assert np.array_equal(poses[0], prog.points[0])
        assert np.array_equal(poses[-1], prog.points[-1])
        # initial dwell holds the start pose
        head = t < prog.dwell_s
        assert np.all(poses[head] == prog.points[0])
        # trailing dwell holds the end pose
        tail = t >= profile.path_end_s
        assert np.all(np.abs(poses[tail] - prog.points[-1]) < 1e-12)

    def test_tag_moves_only_x_and_returns(self):
        prog = single_axis_program(80.0, 3000.0,
                                   tag_amplitude_mm=1.5, tag_duration_s=0.12)
        sig = plan_trajectory(prog, 0.003)
        t = sig.times()
        tag = (t >= prog.dwell_s) & (t < prog.dwell_s + prog.tag_duration_s)
        x_dev = sig.channels["X"][tag] - prog.points[0, 0]
        tau = (t[tag] - prog.dwell_s) / prog.tag_duration_s
        expect = 1.5 * 64.0 * tau ** 3 * (1.0 - tau) ** 3
        assert np.allclose(x_dev, expect, rtol=0, atol=1e-12)
        assert np.max(x_dev) > 0.9 * 1.5
        for name in ("Y", "Z", "A", "C"):
            assert np.all(sig.channels[name][tag] == prog.points[0, 1])
        # back on the start pose during the post-tag dwell
        after = (t >= prog.dwell_s + prog.tag_duration_s) & \
                (t < prog.dwell_s + prog.tag_duration_s + prog.dwell_s)
        assert np.all(np.abs(sig.channels["X"][after]) < 1e-12)

    @staticmethod
    def _axwise_polyline_gap(scaled_pos, scaled_pts):
        """Smallest over segments of the largest per-axis distance from
        each sample to the segment, minimized along the segment (the
        max-axis distance is convex in the segment parameter, so a
        ternary search converges)."""
        n = scaled_pos.shape[0]
        best = np.full(n, np.inf)
        for k in range(len(scaled_pts) - 1):
            a, b = scaled_pts[k], scaled_pts[k + 1]
            lo = np.zeros(n)
            hi = np.ones(n)
            for _ in range(60):
                m1 = lo + (hi - lo) / 3.0
                m2 = hi - (hi - lo) / 3.0
                f1 = np.max(np.abs(scaled_pos - (a + m1[:, None] * (b - a))),
                            axis=1)
                f2 = np.max(np.abs(scaled_pos - (a + m2[:, None] * (b - a))),
                            axis=1)
                take = f1 < f2
                hi = np.where(take, m2, hi)
                lo = np.where(take, lo, m1)
            mid = 0.5 * (lo + hi)
            f = np.max(np.abs(scaled_pos - (a + mid[:, None] * (b - a))),
                       axis=1)
            best = np.minimum(best, f)
        return best

    @pytest.mark.parametrize("tol", [1.2, 0.05])
    def test_path_stays_within_corner_tolerance(self, tol):
        geom = default_geometry()
        prog = make_tracking_program(geom, 18896.0,
                                     corner_tolerance_units=tol)
        sig, profile = plan_trajectory(prog, 0.003, return_profile=True)
        t = sig.times()
        on_path = (t >= profile.path_start_s) & (t <= profile.path_end_s)
        scaled = sig.joint_matrix()[on_path] * PROGRAM_UNIT_SCALE
        pts = prog.points * PROGRAM_UNIT_SCALE
        gap = self._axwise_polyline_gap(scaled, pts)
        assert np.max(gap) <= tol * (1 + 1e-9) + 1e-9
        # the corners are actually cut, not traversed exactly
        assert np.max(gap) > 0.02

    def test_corner_blend_deviation_matches_quintic_factor(self):
        # right angle X -> Y; deviation at the corner midpoint is
        # BLEND_DEVIATION_FACTOR * h per axis by the smoothstep algebra
        pts = np.zeros((3, 5))
        pts[1, 0] = 40.0
        pts[2, 0] = 40.0
        pts[2, 1] = 40.0
        prog = TrajectoryProgram(points=pts, feed_mm_min=600.0,
                                 corner_tolerance_units=0.5,
                                 amax=np.full(5, 60000.0))
        sig, profile = plan_trajectory(prog, 0.003, return_profile=True)
        h = profile.blend_half_lengths[1]
        assert h == pytest.approx(0.99 * 0.5 / BLEND_DEVIATION_FACTOR)
        corner = np.array([40.0, 0.0])
        xy = np.stack([sig.channels["X"], sig.channels["Y"]], axis=1)
        gap = np.min(np.max(np.abs(xy - corner), axis=1))
        # nearest sample sits within one cycle of the blend midpoint
        v_j = profile.junction_speeds[1]
        slack = v_j * 0.003
        expect = BLEND_DEVIATION_FACTOR * h
        assert abs(gap - expect) < slack
        assert gap <= 0.5 + 1e-12

    def test_junction_speed_from_acceleration_budget(self):
        pts = np.zeros((3, 5))
        pts[1, 0] = 40.0
        pts[2, 0] = 40.0
        pts[2, 1] = 40.0
        tight = TrajectoryProgram(points=pts, feed_mm_min=30000.0,
                                  corner_tolerance_units=0.01,
                                  amax=np.full(5, 3000.0))
        _, profile = plan_trajectory(tight, 0.003, return_profile=True)
        v_feed = 30000.0 / 60.0
        assert profile.junction_speeds[1] < v_feed
        assert profile.junction_speeds[0] == 0.0
        assert profile.junction_speeds[-1] == 0.0

        loose = TrajectoryProgram(points=pts, feed_mm_min=3000.0,
                                  corner_tolerance_units=1.0,
                                  amax=np.full(5, 80000.0))
        _, profile = plan_trajectory(loose, 0.003, return_profile=True)
        assert profile.junction_speeds[1] == pytest.approx(50.0)

    def test_single_point_program_is_tag_only(self):
        pts = np.tile(np.array([5.0, -2.0, 1.0, 0.1, 0.2]), (2, 1))
        prog = TrajectoryProgram(points=pts, feed_mm_min=1000.0)
        sig = plan_trajectory(prog, 0.003)
        for i, name in enumerate(AXIS_NAMES):
            if name == "X":
                continue
            assert np.all(sig.channels[name] == pts[0, i])
        x = sig.channels["X"]
        assert x[0] == pts[0, 0] and x[-1] == pts[0, 0]
        assert np.max(x - pts[0, 0]) == pytest.approx(
            prog.tag_amplitude_mm, rel=0.05)

    def test_huge_tolerance_clamped_by_segment_length(self):
        # blend half-lengths never eat more than 45% of a segment, so a
        # sloppy tolerance on short segments still plans cleanly
        pts = np.zeros((4, 5))
        pts[1, 0] = 1.0
        pts[2, 1] = 1.0
        pts[2, 0] = 1.0
        pts[3, 0] = 2.0
        pts[3, 1] = 1.0
        prog = TrajectoryProgram(points=pts, feed_mm_min=1000.0,
                                 corner_tolerance_units=5.0)
        sig, profile = plan_trajectory(prog, 0.003, return_profile=True)
        assert all(h <= 0.45 + 1e-12 for h in profile.blend_half_lengths)
        scaled = sig.joint_matrix() * PROGRAM_UNIT_SCALE
        t = sig.times()
        on_path = (t >= profile.path_start_s) & (t <= profile.path_end_s)
        gap = self._axwise_polyline_gap(scaled[on_path],
                                        pts * PROGRAM_UNIT_SCALE)
        assert np.max(gap) <= 5.0

    def test_nan_feed_rejected(self):
        prog = single_axis_program(10.0, 1000.0)
        with pytest.raises(ValueError, match="feed"):
            prog.with_feed(float("nan"))

    def test_invalid_cycle_raises(self):
        prog = single_axis_program(10.0, 1000.0)
        with pytest.raises(ValueError):
            plan_trajectory(prog, 0.0)

    def test_deterministic(self):
        geom = default_geometry()
        prog = make_tracking_program(geom, 5832.0)
        a = plan_trajectory(prog, 0.003)
        b = plan_trajectory(prog, 0.003)
        for name in AXIS_NAMES:
            assert np.array_equal(a.channels[name], b.channels[name])

    def test_acceleration_peaks_at_segment_transitions(self):
        geom = default_geometry()
        prog = make_tracking_program(geom, 18896.0)
        sig, profile = plan_trajectory(prog, 0.003, return_profile=True)
        scaled = sig.joint_matrix() * PROGRAM_UNIT_SCALE
        acc = np.zeros_like(scaled)
        acc[1:-1] = (scaled[2:] - 2 * scaled[1:-1] + scaled[:-2]) / 0.003 ** 2
        mag = np.linalg.norm(acc, axis=1)
        t = sig.times()
        on_path = (t > profile.path_start_s) & (t < profile.path_end_s)
        floor = np.median(mag[on_path])
        for tj in profile.junction_times_s:
            near = np.abs(t - tj) < 0.05
            assert np.max(mag[near]) > 5.0 * floor + 1.0

    def test_profile_bookkeeping(self):
        geom = default_geometry()
        prog = make_tracking_program(geom, 3240.0)
        sig, profile = plan_trajectory(prog, 0.003, return_profile=True)
        pts = prog.points * PROGRAM_UNIT_SCALE
        length = np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1))
        assert profile.path_length_units == pytest.approx(length)
        assert profile.path_end_s > profile.path_start_s
        assert profile.total_time_s == pytest.approx(
            profile.path_end_s + prog.dwell_s)
        assert len(profile.junction_times_s) == len(pts) - 2
        assert sig.times()[-1] <= profile.total_time_s + 1e-9


class TestServoResponse:
    def test_ideal_passthrough(self, rng):
        poses = np.cumsum(rng.normal(0, 0.01, (50, 5)), axis=0)
        sig = pose_signalset(poses, 333.0)
        out = servo_response(sig, ServoParams(mode="ideal"))
        for name in AXIS_NAMES:
            assert np.array_equal(out.channels[name], sig.channels[name])

    def test_starts_on_first_setpoint(self, rng):
        poses = rng.normal(0, 1.0, (20, 5)) + 7.0
        sig = pose_signalset(poses, 333.0)
        for mode in ("first_order", "second_order"):
            out = servo_response(sig, ServoParams(mode=mode))
            for name in AXIS_NAMES:
                assert out.channels[name][0] == sig.channels[name][0]

    def test_first_order_ramp_following_error(self):
        # steady-state error on a ramp of slope v is exactly v / Kv
        kv = 16.7
        v = 40.0
        dt = 0.003
        n = int(round(30.0 / kv / dt))
        t = np.arange(n) * dt
        poses = np.zeros((n, 5))
        poses[:, 0] = v * t
        out = servo_response(pose_signalset(poses, 1 / dt),
                             ServoParams(mode="first_order",
                                         kv=np.full(5, kv)))
        err = poses[:, 0] - out.channels["X"]
        settle = t > 5.0 / kv
        assert np.all(np.abs(err[settle] - v / kv) < 0.01 * v / kv)
        assert abs(err[-1] - v / kv) < 1e-10

    def test_first_order_matches_ode_integration(self, rng):
        kv = 25.0
        dt = 0.003
        n = 160
        u = np.cumsum(rng.normal(0, 0.05, n))
        u = np.convolve(u, np.full(8, 0.125), mode="same")
        t = np.arange(n) * dt
        out = servo_response(pose_signalset(
            np.column_stack([u, *[np.zeros(n)] * 4]), 1 / dt),
            ServoParams(mode="first_order", kv=np.full(5, kv)))

        def rhs(ti, y):
            return kv * (np.interp(ti, t, u) - y[0])

        sol = solve_ivp(rhs, (0.0, t[-1]), [u[0]], t_eval=t,
                        rtol=1e-10, atol=1e-12, max_step=dt)
        assert np.max(np.abs(out.channels["X"] - sol.y[0])) < 1e-7

    def test_second_order_matches_ode_integration(self, rng):
        f0, zeta = 12.0, 0.8
        omega = 2 * math.pi * f0
        dt = 0.003
        n = 400
        u = np.cumsum(rng.normal(0, 0.03, n))
        u = np.convolve(u, np.full(10, 0.1), mode="same")
        t = np.arange(n) * dt
        out = servo_response(pose_signalset(
            np.column_stack([u, *[np.zeros(n)] * 4]), 1 / dt),
            ServoParams(mode="second_order", natural_frequency_hz=f0,
                        damping=zeta))
        du = np.zeros(n)
        du[:-1] = np.diff(u) / dt  # slope is piecewise constant

        def rhs(ti, y):
            k = min(int(ti / dt), n - 1)
            ui = np.interp(ti, t, u)
            return [y[1], -omega ** 2 * y[0] - 2 * zeta * omega * y[1]
                    + omega ** 2 * ui + 2 * zeta * omega * du[k]]

        sol = solve_ivp(rhs, (0.0, t[-1]), [u[0], 0.0], t_eval=t,
                        rtol=1e-10, atol=1e-12, max_step=dt)
        assert np.max(np.abs(out.channels["X"] - sol.y[0])) < 1e-6

    def test_second_order_ramp_has_no_steady_error(self):
        # velocity feedforward cancels the ramp-following lag entirely
        dt = 0.003
        n = 400
        t = np.arange(n) * dt
        poses = np.zeros((n, 5))
        poses[:, 0] = 55.0 * t
        out = servo_response(pose_signalset(poses, 1 / dt),
                             ServoParams(mode="second_order",
                                         natural_frequency_hz=150.0,
                                         damping=1.0))
        err = poses[:, 0] - out.channels["X"]
        assert np.max(np.abs(err[n // 2:])) < 1e-12

    def test_linear_time_invariant(self, rng):
        dt = 0.003
        n = 200
        a = np.cumsum(rng.normal(0, 0.02, (n, 5)), axis=0)
        b = np.cumsum(rng.normal(0, 0.02, (n, 5)), axis=0)
        a -= a[0]
        b -= b[0]
        servo = ServoParams(mode="second_order", natural_frequency_hz=40.0)
        ra = servo_response(pose_signalset(a, 1 / dt), servo)
        rb = servo_response(pose_signalset(b, 1 / dt), servo)
        rab = servo_response(pose_signalset(2.0 * a + 3.0 * b, 1 / dt), servo)
        for name in AXIS_NAMES:
            combo = 2.0 * ra.channels[name] + 3.0 * rb.channels[name]
            assert np.allclose(rab.channels[name], combo, rtol=0, atol=1e-12)

    def test_equal_kv_lag_stays_on_straight_line(self):
        # proportional lag on every axis keeps the error along the path
        dt = 0.003
        n = 500
        t = np.arange(n) * dt
        direction = np.array([3.0, -2.0, 1.5, 0.004, 0.006])
        poses = t[:, None] * direction
        out = servo_response(pose_signalset(poses, 1 / dt),
                             ServoParams(mode="first_order",
                                         kv=np.full(5, 12.0)))
        err = poses - out.joint_matrix()
        settle = t > 5.0 / 12.0
        unit = direction / np.linalg.norm(direction)
        cross = err[settle] - np.outer(err[settle] @ unit, unit)
        assert np.max(np.abs(cross)) < 1e-10
        assert np.max(np.abs(err[settle])) > 1e-3  # lag itself is not zero

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            ServoParams(mode="third_order")
        with pytest.raises(ValueError):
            ServoParams(mode="first_order", kv=np.zeros(5))
        with pytest.raises(ValueError):
            ServoParams(mode="second_order", damping=2.5)
        with pytest.raises(ValueError):
            ServoParams(mode="second_order", natural_frequency_hz=0.0)

    def test_dict_round_trip(self):
        servo = ServoParams(mode="second_order", kv=np.full(5, 20.0),
                            natural_frequency_hz=99.0, damping=0.9)
        back = ServoParams.from_dict(servo.to_dict())
        assert back.mode == servo.mode
        assert np.array_equal(back.kv, servo.kv)
        assert back.natural_frequency_hz == servo.natural_frequency_hz
        assert back.damping == servo.damping


class TestMotionTerm:
    def test_validation(self):
        with pytest.raises(ValueError):
            MotionTerm("Q", np.array([1.0, 0, 0]), 0.5, 80.0)
        with pytest.raises(ValueError):
            MotionTerm("X", np.array([1.0, 0]), 0.5, 80.0)
        with pytest.raises(ValueError):
            MotionTerm("X", np.array([1.0, 0, 0]), -0.5, 80.0)
        with pytest.raises(ValueError):
            MotionTerm("X", np.array([1.0, 0, 0]), 0.5, 0.0)

    def test_linear_axis_wave(self):
        term = MotionTerm("X", np.array([0.0, 1.0, 0.0]), 2.0, 80.0,
                          phase_rad=0.3)
        pos = np.array([0.0, 20.0, 80.0])
        out = term.evaluate_mm(pos)
        expect_y = 2.0e-3 * np.sin(2 * np.pi * pos / 80.0 + 0.3)
        assert np.allclose(out[:, 1], expect_y, rtol=0, atol=1e-18)
        assert np.all(out[:, [0, 2]] == 0.0)
        # one full period returns the starting value
        assert out[2, 1] == pytest.approx(out[0, 1])

    def test_rotary_axis_period_in_degrees(self):
        term = MotionTerm("C", np.array([1.0, 0.0, 0.0]), 1.0, 90.0)
        quarter = 90.0 * RAD_PER_DEG
        out = term.evaluate_mm(np.array([0.0, quarter / 4, quarter]))
        assert out[0, 0] == pytest.approx(0.0, abs=1e-18)
        assert out[1, 0] == pytest.approx(1e-3)  # quarter period peak
        assert out[2, 0] == pytest.approx(0.0, abs=1e-15)

    def test_dict_round_trip(self):
        term = MotionTerm("A", np.array([0.0, 0.5, 0.5]), 0.3, 30.0, 0.4)
        back = MotionTerm.from_dict(term.to_dict())
        assert back.axis == term.axis
        assert np.array_equal(back.direction, term.direction)
        assert back.period_units == term.period_units


class TestStructureParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            StructureParams(dq_true=np.zeros(7))
        with pytest.raises(ValueError):
            StructureParams(drift_um=np.zeros(2))
        with pytest.raises(ValueError):
            StructureParams(noise_um=-0.1)
        with pytest.raises(ValueError):
            StructureParams(compliance_um_per_m_s2={"A": np.ones(3)})
        with pytest.raises(ValueError):
            StructureParams(compliance_um_per_rad_s2={"X": np.ones(3)})
        with pytest.raises(ValueError):
            StructureParams(compliance_um_per_m_s2={"X": np.ones(2)})

    def test_dict_round_trip(self):
        params = StructureParams(
            dq_true=np.arange(8) * 1e-5,
            motion_terms=[MotionTerm("X", np.array([1.0, 0, 0]), 0.5, 80.0)],
            drift_um=np.array([1.0, -2.0, 0.5]),
            compliance_um_per_m_s2={"X": np.array([2.0, 0.5, 0.3])},
            compliance_um_per_rad_s2={"A": np.array([1.0, 1.0, 0.0])},
            noise_um=0.25)
        back = StructureParams.from_dict(params.to_dict())
        # link errors are stored in urad/um, so equality is to the ulp
        assert np.allclose(back.dq_true, params.dq_true, rtol=1e-12, atol=0)
        assert np.array_equal(back.drift_um, params.drift_um)
        assert len(back.motion_terms) == 1
        assert np.array_equal(back.compliance_um_per_m_s2["X"],
                              params.compliance_um_per_m_s2["X"])
        assert back.noise_um == 0.25


class TestSmoothedAcceleration:
    def test_constant_acceleration_recovered_exactly(self):
        # averaging a quadratic adds a constant, which second differences
        # ignore, so the interior estimate is exact
        rate = 1000.0
        t = np.arange(300) / rate
        a_true = 7.5
        p = 0.5 * a_true * t ** 2 + 3.0 * t + 1.0
        acc = _smoothed_acceleration(p, rate, window_s=0.011)
        interior = acc[20:-20]
        assert np.allclose(interior, a_true, rtol=1e-9)

    def test_window_damps_noise(self, rng):
        rate = 1000.0
        p = rng.normal(0, 1e-4, 2000)
        raw = _smoothed_acceleration(p, rate, window_s=0.0)
        smooth = _smoothed_acceleration(p, rate, window_s=0.02)
        assert np.std(smooth) < 0.2 * np.std(raw)

    def test_zero_window_is_plain_second_difference(self):
        rate = 100.0
        p = np.array([0.0, 1.0, 4.0, 9.0, 16.0])  # squares: curvature 2
        acc = _smoothed_acceleration(p, rate, window_s=0.0)
        assert np.allclose(acc[1:-1], 2.0 * rate ** 2)
        assert acc[0] == acc[1] and acc[-1] == acc[-2]


class TestSynthesizeMeasurement:
    @staticmethod
    def smooth_poses(n=400, rate=500.0):
        t = np.arange(n) / rate
        poses = np.zeros((n, 5))
        poses[:, 0] = 30.0 * np.sin(2 * np.pi * 0.7 * t)
        poses[:, 1] = 20.0 * np.cos(2 * np.pi * 0.5 * t) - 20.0
        poses[:, 2] = 10.0 * np.sin(2 * np.pi * 0.9 * t + 1.0)
        poses[:, 3] = 0.3 * np.sin(2 * np.pi * 0.4 * t)
        poses[:, 4] = 0.5 * np.cos(2 * np.pi * 0.3 * t) - 0.5
        return pose_signalset(poses, rate)

    def test_null_machine_reads_pure_nominal(self, geom):
        enc = self.smooth_poses()
        reading, parts = synthesize_measurement(
            enc, StructureParams(noise_um=0.0), geom, return_components=True)
        nominal = dkt_batch(enc.joint_matrix(), geom)
        got_um = np.stack([reading.channels[c] for c in ("s1", "s2", "s3")],
                          axis=1)
        assert np.array_equal(got_um, nominal * 1e3)
        for key in ("link", "motion", "drift", "dynamic", "noise"):
            assert np.all(parts[key] == 0.0)

    def test_link_errors_match_jacobian_prediction(self, geom):
        enc = self.smooth_poses()
        dq = np.array([50e-6, -40e-6, 30e-6, -60e-6, 45e-6, -35e-6,
                       25e-6, 0.015])
        _, parts = synthesize_measurement(
            enc, StructureParams(dq_true=dq, noise_um=0.0), geom,
            return_components=True)
        J = link_jacobian_batch(enc.joint_matrix(), geom)
        predicted = J @ dq
        # rotations of ~5e-5 rad over ~700 mm levers: second order < 2 nm
        assert np.max(np.abs(parts["link"] - predicted)) < 2e-6

    def test_motion_terms_add_in_machine_frame(self, geom):
        enc = self.smooth_poses()
        term = MotionTerm("Y", np.array([0.2, 1.0, 0.1]), 0.8, 60.0, 0.5)
        reading, parts = synthesize_measurement(
            enc, StructureParams(motion_terms=[term], noise_um=0.0), geom,
            return_components=True)
        y = enc.channels["Y"]
        wave = 0.8e-3 * np.sin(2 * np.pi * y / 60.0 + 0.5)
        expect = wave[:, None] * np.array([0.2, 1.0, 0.1])
        assert np.allclose(parts["motion"], expect, rtol=0, atol=1e-18)
        nominal = dkt_batch(enc.joint_matrix(), geom)
        got = np.stack([reading.channels[c] for c in ("s1", "s2", "s3")],
                       axis=1) / 1e3
        # the wave rides on a ~140 mm nominal reading, so the subtraction
        # is only good to the ulp of the full reading
        assert np.allclose(got - nominal, expect, rtol=0, atol=1e-12)

    def test_constant_drift(self, geom):
        enc = self.smooth_poses()
        _, parts = synthesize_measurement(
            enc, StructureParams(drift_um=np.array([2.0, -1.0, 0.5]),
                                 noise_um=0.0),
            geom, return_components=True)
        assert np.all(parts["drift"] == np.array([2.0, -1.0, 0.5]) * 1e-3)

    def test_compliance_scales_smoothed_acceleration(self, geom):
        # constant-acceleration X move: deflection = gain * a exactly
        rate = 500.0
        n = 400
        t = np.arange(n) / rate
        poses = np.zeros((n, 5))
        a_mm = 4000.0  # mm/s^2
        poses[:, 0] = 0.5 * a_mm * t ** 2
        gain = np.array([2.5, 0.9, 0.75])
        _, parts = synthesize_measurement(
            pose_signalset(poses, rate),
            StructureParams(compliance_um_per_m_s2={"X": gain},
                            noise_um=0.0, accel_window_s=0.01),
            geom, return_components=True)
        expect = gain * (a_mm * 1e-3) * 1e-3  # um/(m/s^2) * m/s^2 -> mm
        interior = parts["dynamic"][20:-20]
        assert np.allclose(interior, expect, rtol=1e-9)

    def test_rotary_compliance_units(self, geom):
        rate = 500.0
        n = 400
        t = np.arange(n) / rate
        poses = np.zeros((n, 5))
        a_rad = 2.0  # rad/s^2
        poses[:, 3] = 0.5 * a_rad * t ** 2
        gain = np.array([0.0, 3.0, 1.0])
        _, parts = synthesize_measurement(
            pose_signalset(poses, rate),
            StructureParams(compliance_um_per_rad_s2={"A": gain},
                            noise_um=0.0, accel_window_s=0.01),
            geom, return_components=True)
        interior = parts["dynamic"][20:-20]
        assert np.allclose(interior, gain * a_rad * 1e-3, rtol=1e-9)

    def test_noise_is_seeded_and_optional(self, geom):
        enc = self.smooth_poses(n=4000)
        params = StructureParams(noise_um=0.4)
        _, a = synthesize_measurement(enc, params, geom,
                                      rng=np.random.default_rng(11),
                                      return_components=True)
        _, b = synthesize_measurement(enc, params, geom,
                                      rng=np.random.default_rng(11),
                                      return_components=True)
        assert np.array_equal(a["noise"], b["noise"])
        assert abs(np.std(a["noise"]) - 0.4e-3) < 0.08e-3
        _, c = synthesize_measurement(enc, params, geom,
                                      return_components=True)
        assert np.all(c["noise"] == 0.0)  # no generator, no noise

    def test_bookkeeping_identity_is_exact(self, geom, rng):
        enc = self.smooth_poses()
        params = StructureParams(
            dq_true=np.array([60e-6, -45e-6, 80e-6, -70e-6, 55e-6,
                              -65e-6, 40e-6, 0.02]),
            motion_terms=[MotionTerm("X", np.array([1.0, 0, 0]), 0.3, 80.0),
                          MotionTerm("C", np.array([0, 1.0, 0]), 0.2, 25.0)],
            drift_um=np.array([1.0, -0.5, 0.3]),
            compliance_um_per_m_s2={"X": np.array([2.0, 0.5, 0.4])},
            noise_um=0.4)
        reading, parts = synthesize_measurement(enc, params, geom, rng=rng,
                                                return_components=True)
        total = sum(parts[k] for k in ("nominal", "link", "motion", "drift",
                                       "dynamic", "noise"))
        got = np.stack([reading.channels[c] for c in ("s1", "s2", "s3")],
                       axis=1) / 1e3
        assert np.max(np.abs(got - total)) < 1e-12


class TestDelayed:
    def test_zero_is_copy(self):
        sig = pose_signalset(np.arange(50.0)[:, None] * np.ones(5), 100.0)
        out = _delayed(sig, 0)
        assert np.array_equal(out.channels["X"], sig.channels["X"])
        out.channels["X"][0] = 99.0
        assert sig.channels["X"][0] == 0.0

    def test_holds_first_value_and_drops_tail(self):
        sig = pose_signalset(np.arange(10.0)[:, None] * np.ones(5), 100.0)
        out = _delayed(sig, 3)
        x = out.channels["X"]
        assert len(x) == 10
        assert np.all(x[:3] == 0.0)
        assert np.array_equal(x[3:], np.arange(7.0))


class TestCampaignConfig:
    def test_round_trip(self, tmp_path):
        cfg = small_campaign_config(seed=3)
        path = tmp_path / "campaign.json"
        cfg.save(path)
        back = CampaignConfig.load(path)
        assert back.feeds_mm_min == cfg.feeds_mm_min
        assert back.seed == cfg.seed
        assert back.delay_nc_cycles == cfg.delay_nc_cycles
        assert back.servo.mode == cfg.servo.mode
        assert np.allclose(back.program.points, cfg.program.points,
                           rtol=1e-15, atol=1e-18)
        assert np.allclose(back.structure.dq_true, cfg.structure.dq_true,
                           rtol=1e-12, atol=0)
        # repeated save/load cycles must not drift the physical values
        cur = back
        for _ in range(5):
            cur = CampaignConfig.from_dict(
                json.loads(json.dumps(cur.to_dict())))
        assert np.allclose(cur.structure.dq_true, cfg.structure.dq_true,
                           rtol=1e-12, atol=0)
        assert np.allclose(cur.program.points, cfg.program.points,
                           rtol=1e-15, atol=1e-18)

    def test_drift_list_must_match_feeds(self):
        cfg = small_campaign_config()
        with pytest.raises(ValueError, match="drift"):
            CampaignConfig(
                geometry=cfg.geometry, program=cfg.program,
                feeds_mm_min=[1000.0, 2000.0], servo=cfg.servo,
                structure=cfg.structure,
                drift_per_session_um=[[0.0, 0.0, 0.0]])

    def test_needs_feeds(self):
        cfg = small_campaign_config()
        with pytest.raises(ValueError, match="feed"):
            CampaignConfig(geometry=cfg.geometry, program=cfg.program,
                           feeds_mm_min=[], servo=cfg.servo,
                           structure=cfg.structure)


@pytest.fixture(scope="module")
def small_campaign(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_campaign")
    config = small_campaign_config()
    records = run_campaign(config, root)
    return config, root, records


class TestRunCampaign:
    def test_session_layout(self, small_campaign):
        config, root, records = small_campaign
        assert [r.ok for r in records] == [True, True]
        assert (root / "geometry.json").exists()
        assert (root / "calibration.json").exists()
        manifest = json.loads((root / "manifest.json").read_text())
        assert manifest["reference"] == "F03000"
        assert [s["id"] for s in manifest["sessions"]] == ["F03000", "F09000"]
        for rec in records:
            for name in ("controller.csv", "encoder.csv", "sensor.csv",
                         "ground_truth.json"):
                assert (rec.directory / name).exists()

    def test_encoder_stream_starts_late(self, small_campaign):
        config, root, _ = small_campaign
        ctrl = load_signals(root / "F03000" / "controller.csv", "joint")
        enc = load_signals(root / "F03000" / "encoder.csv", "joint")
        assert enc.n == ctrl.n
        for name in AXIS_NAMES:
            v = enc.channels[name]
            assert np.all(v[:config.delay_nc_cycles + 1] == v[0])

    def test_recording_delay_recovered_from_files(self, small_campaign):
        config, root, _ = small_campaign
        ctrl = load_signals(root / "F09000" / "controller.csv", "joint")
        enc = load_signals(root / "F09000" / "encoder.csv", "joint")
        d = estimate_delay(ctrl, enc, search_window_s=0.05)
        expect = config.delay_nc_cycles * config.nc_cycle_s
        assert abs(d - expect) <= config.nc_cycle_s / 2

    def test_ground_truth_bookkeeping(self, small_campaign):
        config, root, _ = small_campaign
        truth = json.loads((root / "F09000" / "ground_truth.json").read_text())
        sensor = load_signals(root / "F09000" / "sensor.csv", "sensor")
        reading = np.stack([sensor.channels[c] for c in ("s1", "s2", "s3")],
                           axis=1) / 1e3
        total = (np.array(truth["nominal_mm"]) + np.array(truth["link_mm"])
                 + np.array(truth["motion_mm"]) + np.array(truth["drift_mm"])
                 + np.array(truth["dynamic_mm"]) + np.array(truth["noise_mm"]))
        assert reading.shape == total.shape
        assert np.max(np.abs(reading - total)) < 1e-12
        assert truth["lead_samples_hint"] == 180
        assert truth["delay_true_s"] == pytest.approx(0.018)
        assert truth["drift_um"] == [0.8, -0.5, 0.4]

    def test_contouring_truth_vanishes_at_rest(self, small_campaign):
        config, root, _ = small_campaign
        truth = json.loads((root / "F03000" / "ground_truth.json").read_text())
        cont = np.array(truth["contouring_mm"])
        assert np.max(np.abs(cont[:100])) < 1e-12
        assert np.max(np.abs(cont[-50:])) < 1e-9
        assert np.max(np.abs(cont)) > 1e-5  # but not identically zero

    def test_truth_dynamic_rms_grows_with_feed(self, small_campaign):
        config, root, _ = small_campaign
        rms = []
        for sid in ("F03000", "F09000"):
            truth = json.loads((root / sid / "ground_truth.json").read_text())
            dyn = np.array(truth["dynamic_mm"])
            rms.append(float(np.sqrt(np.mean(np.linalg.norm(dyn, axis=1) ** 2))))
        # the fixed-speed tag move contributes equally at both feeds, so
        # the short path only shows moderate growth here; the six-feed
        # campaign in the acceptance suite checks the scaling trend
        assert rms[1] > 1.2 * rms[0]

    def test_deterministic_sessions(self, small_campaign, tmp_path):
        config, root, _ = small_campaign
        again = tmp_path / "again"
        simulate_session(config, 1, again)
        for name in ("controller.csv", "encoder.csv", "sensor.csv",
                     "ground_truth.json"):
            assert filecmp.cmp(root / "F09000" / name, again / name,
                               shallow=False), name

    def test_failed_session_is_recorded_and_skipped(self, tmp_path):
        config = small_campaign_config()
        bad = CampaignConfig(
            geometry=config.geometry, program=config.program,
            feeds_mm_min=[3000.0, -5.0], servo=ServoParams(mode="ideal"),
            structure=StructureParams(noise_um=0.0),
            seed=1)
        records = run_campaign(bad, tmp_path)
        assert records[0].ok
        assert not records[1].ok
        assert "ValueError" in records[1].error
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["reference"] == "F03000"
        assert manifest["sessions"][1]["ok"] is False

    def test_session_ids(self):
        assert session_id_for_feed(1000.0) == "F01000"
        assert session_id_for_feed(18896.0) == "F18896"


class TestNullMachineThroughPipeline:
    def test_zero_structure_decomposes_to_nothing(self, tmp_path):
        # ideal tracking and a perfect structure: every recovered
        # contribution stays below a hundredth of a micrometre
        geom = default_geometry()
        prog = make_tracking_program(
            geom, 1000.0,
            a_deg=[0.0, 1.5, 3.0, 1.0],
            c_deg=[0.0, 2.0, 4.0, 6.0])
        config = CampaignConfig(
            geometry=geom, program=prog, feeds_mm_min=[1000.0],
            servo=ServoParams(mode="ideal"),
            structure=StructureParams(noise_um=0.0),
            seed=0)
        records = run_campaign(config, tmp_path)
        assert records[0].ok
        decomp = decompose_files(records[0].directory, geom,
                                 feed_mm_min=1000.0)
        for key, part in decomp.contributions().items():
            assert np.max(np.abs(part)) < 1e-5, key


class TestPresets:
    def test_tracking_waypoints_hold_the_ball_still(self):
        geom = default_geometry()
        taus = []
        for a_deg, c_deg in [(0, 0), (3.0, 9.5), (-4.5, 19.5), (1.0, 2.5)]:
            wp = tracking_waypoint(geom, a_deg * RAD_PER_DEG,
                                   c_deg * RAD_PER_DEG)
            taus.append(dkt(wp, geom))
        taus = np.array(taus)
        assert np.max(np.abs(taus - taus[0])) < 1e-9

    def test_demo_program_shape(self):
        geom = default_geometry()
        prog = make_tracking_program(geom, 1000.0)
        assert prog.points.shape[0] == 18  # 17 segments
        with pytest.raises(ValueError, match="equal length"):
            make_tracking_program(geom, 1000.0, a_deg=[0.0, 1.0],
                                  c_deg=[0.0])
