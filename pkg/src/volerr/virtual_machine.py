"""Synthetic five-axis machine: planner, servo, structure, campaign runner.

Every dataset the analysis pipeline consumes can be generated here with
known injected errors, so each decomposition stage has an exact oracle.
The chain is: joint-space linear program -> feed-profiled setpoints at the
NC cycle -> servo tracking response -> structural error synthesis at the
sensor clock -> CSV session files plus a per-sample ground-truth record.

Joint-space path lengths mix units on purpose (mm for X, Y, Z and degrees
for A, C), matching how joint-space feed is programmed on the control.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm
from scipy.signal import lfilter, ss2tf

from .kinematics import (
    AXIS_NAMES,
    RAD_PER_DEG,
    MachineGeometry,
    dkt_batch,
    dkt_with_errors_batch,
    link_errors_from_dict,
    link_errors_to_dict,
)
from .signal_io import (
    SensorCalibration,
    SignalSet,
    resample,
    snap_angles_to_writable,
    write_signals,
)

# scale joint columns into program units (mm / deg) for path-length math
PROGRAM_UNIT_SCALE = np.array([1.0, 1.0, 1.0, 1.0 / RAD_PER_DEG,
                               1.0 / RAD_PER_DEG])

# quintic smoothstep constants: max |deviation| factor at the corner
# midpoint and max |d sigma/d tau| inside the blend
BLEND_DEVIATION_FACTOR = 0.15625
BLEND_SLOPE_MAX = 1.875
BLEND_ACCEL_MARGIN = 0.9


@dataclass
class TrajectoryProgram:
    """Contiguous joint-space polyline with feed and axis limits.

    points is (m + 1, 5) in internal units (mm, rad); rows are visited in
    order with linear joint interpolation.  vmax/amax are per-axis limits
    in program units per second (squared): mm for linear axes, degrees
    for rotary ones.  corner_tolerance_units bounds the per-axis deviation
    from the exact corner, again in program units.
    """

    points: np.ndarray
    feed_mm_min: float
    corner_tolerance_units: float = 0.01
    vmax: np.ndarray = field(default_factory=lambda: np.array(
        [500.0, 500.0, 500.0, 360.0, 360.0]))
    amax: np.ndarray = field(default_factory=lambda: np.full(5, 60000.0))
    tag_amplitude_mm: float = 0.8
    tag_duration_s: float = 0.12
    dwell_s: float = 0.1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.vmax = np.asarray(self.vmax, dtype=float)
        self.amax = np.asarray(self.amax, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 5:
            raise ValueError("points must be (m + 1, 5)")
        if len(self.points) < 1:
            raise ValueError("need at least one point")
        if not self.feed_mm_min > 0.0:  # also rejects nan
            raise ValueError("feed must be positive")
        if not self.corner_tolerance_units > 0.0:
            raise ValueError("corner tolerance must be positive")
        if not (np.all(self.vmax > 0.0) and np.all(self.amax > 0.0)
                and np.all(np.isfinite(self.vmax))
                and np.all(np.isfinite(self.amax))):
            raise ValueError("axis limits must be positive and finite")
        if not (0.0 < self.tag_duration_s and 0.0 <= self.dwell_s):
            raise ValueError("tag/dwell durations invalid")

    @classmethod
    def from_segments(cls, segments, **kwargs) -> "TrajectoryProgram":
        """Build from (start, end) pose pairs, checking contiguity."""
        pts = [np.asarray(segments[0][0], dtype=float)]
        for start, end in segments:
            start = np.asarray(start, dtype=float)
            if not np.allclose(start, pts[-1], atol=1e-12):
                raise ValueError("segments are not contiguous")
            pts.append(np.asarray(end, dtype=float))
        return cls(points=np.array(pts), **kwargs)

    def with_feed(self, feed_mm_min: float) -> "TrajectoryProgram":
        return replace(self, feed_mm_min=feed_mm_min)

    def to_dict(self) -> dict:
        pts = self.points.copy()
        pts[:, 3:] /= RAD_PER_DEG
        return {
            "points_mm_deg": pts.tolist(),
            "feed_mm_min": self.feed_mm_min,
            "corner_tolerance_units": self.corner_tolerance_units,
            "vmax_units_per_s": self.vmax.tolist(),
            "amax_units_per_s2": self.amax.tolist(),
            "tag_amplitude_mm": self.tag_amplitude_mm,
            "tag_duration_s": self.tag_duration_s,
            "dwell_s": self.dwell_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryProgram":
        pts = np.asarray(d["points_mm_deg"], dtype=float)
        pts[:, 3:] *= RAD_PER_DEG
        return cls(points=pts, feed_mm_min=d["feed_mm_min"],
                   corner_tolerance_units=d.get("corner_tolerance_units", 0.01),
                   vmax=np.asarray(d.get("vmax_units_per_s",
                                         [500.0, 500.0, 500.0, 360.0, 360.0])),
                   amax=np.asarray(d.get("amax_units_per_s2", [60000.0] * 5)),
                   tag_amplitude_mm=d.get("tag_amplitude_mm", 0.8),
                   tag_duration_s=d.get("tag_duration_s", 0.12),
                   dwell_s=d.get("dwell_s", 0.1))


@dataclass
class PlanProfile:
    """Where the planner put things on the time axis."""

    feed_mm_min: float
    path_length_units: float
    path_start_s: float
    path_end_s: float
    total_time_s: float
    junction_times_s: list
    segment_speeds: list
    junction_speeds: list
    blend_half_lengths: list


def _smoothstep_offset(tau):
    """Integral of the quintic smoothstep: tau^6 - 3 tau^5 + 2.5 tau^4."""
    return ((tau - 3.0) * tau + 2.5) * tau ** 4


def _tag_bump(tau):
    """Zero-velocity, zero-accel-at-ends bump, peak 1 at tau = 1/2."""
    return 64.0 * tau ** 3 * (1.0 - tau) ** 3


def plan_trajectory(prog: TrajectoryProgram, nc_cycle_s: float = 0.003,
                    return_profile: bool = False):
    """Feed-profiled joint setpoints at the NC cycle.

    The path parameter s advances with a trapezoidal speed profile limited
    per segment by feed and axis velocity/acceleration limits; corners are
    rounded by a quintic blend confined to the per-axis tolerance band and
    traversed at a speed that respects acceleration limits.  A dedicated
    single-axis tag move precedes the path for stream synchronization.
    """
    if nc_cycle_s <= 0.0:
        raise ValueError("nc cycle must be positive")
    pts = prog.points * PROGRAM_UNIT_SCALE
    deltas = np.diff(pts, axis=0)
    lengths = np.linalg.norm(deltas, axis=1)
    keep = lengths > 1e-12
    pts = np.vstack([pts[0], pts[1:][keep]])
    deltas = np.diff(pts, axis=0)
    lengths = np.linalg.norm(deltas, axis=1)
    m = len(lengths)
    v_feed = prog.feed_mm_min / 60.0

    if m > 0:
        units = deltas / lengths[:, None]
        with np.errstate(divide="ignore"):
            seg_v = np.minimum(v_feed, np.min(np.where(
                np.abs(units) > 1e-15, prog.vmax / np.abs(units), np.inf),
                axis=1))
            seg_a = np.min(np.where(np.abs(units) > 1e-15,
                                    prog.amax / np.abs(units), np.inf), axis=1)
        if np.any(seg_v <= 0.0) or np.any(~np.isfinite(seg_a)):
            raise ValueError("infeasible limits: zero-length speed profile")
        s_junction = np.concatenate([[0.0], np.cumsum(lengths)])

        # corner blends: half-length from the tolerance, entry speed from
        # the acceleration budget inside the blend
        h = np.zeros(m + 1)
        v_corner = np.full(m + 1, np.inf)
        for j in range(1, m):
            du = units[j] - units[j - 1]
            du_max = np.max(np.abs(du))
            if du_max < 1e-12:
                continue
            h_j = min(0.99 * prog.corner_tolerance_units
                      / (BLEND_DEVIATION_FACTOR * du_max),
                      0.45 * min(lengths[j - 1], lengths[j]))
            with np.errstate(divide="ignore"):
                a_eff = np.min(np.where(np.abs(du) > 1e-15,
                                        prog.amax / np.abs(du), np.inf))
            h[j] = h_j
            v_corner[j] = math.sqrt(2.0 * h_j * BLEND_ACCEL_MARGIN * a_eff
                                    / BLEND_SLOPE_MAX)

        w = np.zeros(m + 1)  # junction speeds
        for j in range(1, m):
            w[j] = min(seg_v[j - 1], seg_v[j], v_corner[j])
        # reachability passes over the free (non-blend) zone of each segment
        free_len = np.array([s_junction[k + 1] - h[k + 1] - (s_junction[k] + h[k])
                             for k in range(m)])
        if np.any(free_len < 0.0):
            raise ValueError("corner blends overlap; tolerance too large")
        for k in range(m):
            w[k + 1] = min(w[k + 1], math.sqrt(w[k] ** 2 + 2 * seg_a[k] * free_len[k]))
        for k in range(m - 1, -1, -1):
            w[k] = min(w[k], math.sqrt(w[k + 1] ** 2 + 2 * seg_a[k] * free_len[k]))

        # time zones: alternating free trapezoid / constant-speed blend
        zones = []  # (t0, s0, kind, params)
        t_cursor = 0.0
        junction_times = []
        for k in range(m):
            s0 = s_junction[k] + h[k]
            L = free_len[k]
            v_in, v_out, vc, a = w[k], w[k + 1], seg_v[k], seg_a[k]
            v_peak = min(vc, math.sqrt(max((2 * a * L + v_in ** 2 + v_out ** 2)
                                           / 2.0, 0.0)))
            v_peak = max(v_peak, v_in, v_out)
            d_acc = (v_peak ** 2 - v_in ** 2) / (2 * a)
            d_dec = (v_peak ** 2 - v_out ** 2) / (2 * a)
            d_cruise = max(L - d_acc - d_dec, 0.0)
            t_acc = (v_peak - v_in) / a
            t_dec = (v_peak - v_out) / a
            t_cruise = d_cruise / v_peak if v_peak > 0 else 0.0
            if L > 0 and v_peak <= 0.0:
                raise ValueError("infeasible limits: zero-length speed profile")
            zones.append((t_cursor, s0, "trapezoid",
                          (v_in, v_peak, v_out, a, t_acc, t_cruise, t_dec)))
            t_cursor += t_acc + t_cruise + t_dec
            if k < m - 1:
                # blend around junction k+1 at constant speed
                hj = h[k + 1]
                if hj > 0.0 and w[k + 1] > 0.0:
                    junction_times.append(t_cursor + hj / w[k + 1])
                    zones.append((t_cursor, s_junction[k + 1] - hj, "constant",
                                  (w[k + 1], 2 * hj / w[k + 1])))
                    t_cursor += 2 * hj / w[k + 1]
                else:
                    junction_times.append(t_cursor)
        t_path = t_cursor
    else:
        units = np.zeros((0, 5))
        s_junction = np.array([0.0])
        h = np.zeros(1)
        zones = []
        junction_times = []
        t_path = 0.0
        seg_v = np.zeros(0)
        w = np.zeros(1)

    # timeline: dwell, tag, dwell, path, dwell
    t_tag0 = prog.dwell_s
    t_path0 = t_tag0 + prog.tag_duration_s + prog.dwell_s
    t_total = t_path0 + t_path + prog.dwell_s
    n = int(math.floor(t_total / nc_cycle_s + 1e-9)) + 1
    t = np.arange(n) * nc_cycle_s

    s_of_t = np.zeros(n)
    tp = t - t_path0
    for (t0, s0, kind, params) in zones:
        if kind == "trapezoid":
            v_in, v_peak, v_out, a, t_acc, t_cruise, t_dec = params
            dur = t_acc + t_cruise + t_dec
            mask = (tp >= t0) & (tp < t0 + dur)
            tau = tp[mask] - t0
            s_local = np.where(
                tau < t_acc,
                v_in * tau + 0.5 * a * tau ** 2,
                np.where(tau < t_acc + t_cruise,
                         v_in * t_acc + 0.5 * a * t_acc ** 2
                         + v_peak * (tau - t_acc),
                         v_in * t_acc + 0.5 * a * t_acc ** 2
                         + v_peak * t_cruise
                         + v_peak * (tau - t_acc - t_cruise)
                         - 0.5 * a * (tau - t_acc - t_cruise) ** 2))
            s_of_t[mask] = s0 + s_local
        else:
            v_const, dur = params
            mask = (tp >= t0) & (tp < t0 + dur)
            s_of_t[mask] = s0 + v_const * (tp[mask] - t0)
    s_of_t[tp >= t_path] = s_junction[-1]
    s_of_t[tp < 0.0] = 0.0

    # map s to joint positions: base polyline plus blend overlay
    if m > 0:
        idx = np.clip(np.searchsorted(s_junction, s_of_t, side="right") - 1,
                      0, m - 1)
        pos = pts[idx] + units[idx] * (s_of_t - s_junction[idx])[:, None]
        for j in range(1, m):
            if h[j] <= 0.0:
                continue
            mask = np.abs(s_of_t - s_junction[j]) < h[j]
            if not np.any(mask):
                continue
            ds = s_of_t[mask] - s_junction[j]
            tau = (ds + h[j]) / (2 * h[j])
            du = units[j] - units[j - 1]
            pos[mask] = (pts[j] + units[j - 1] * ds[:, None]
                         + du * (2 * h[j] * _smoothstep_offset(tau))[:, None])
    else:
        pos = np.tile(pts[0], (n, 1))

    # synchronization tag: a single bump on the X axis before the path
    tag_mask = (t >= t_tag0) & (t < t_tag0 + prog.tag_duration_s)
    tau_tag = (t[tag_mask] - t_tag0) / prog.tag_duration_s
    pos[tag_mask, 0] += prog.tag_amplitude_mm * _tag_bump(tau_tag)

    pos = pos / PROGRAM_UNIT_SCALE
    signals = SignalSet(rate_hz=1.0 / nc_cycle_s, start_s=0.0, channels={
        name: pos[:, i].copy() for i, name in enumerate(AXIS_NAMES)})
    if not return_profile:
        return signals
    profile = PlanProfile(
        feed_mm_min=prog.feed_mm_min,
        path_length_units=float(s_junction[-1]),
        path_start_s=t_path0, path_end_s=t_path0 + t_path,
        total_time_s=t_total,
        junction_times_s=[t_path0 + jt for jt in junction_times],
        segment_speeds=list(map(float, seg_v)),
        junction_speeds=list(map(float, w)),
        blend_half_lengths=list(map(float, h)))
    return signals, profile


@dataclass
class ServoParams:
    """Per-axis tracking loop: pass-through, velocity loop, or damped
    second-order loop with velocity feedforward."""

    mode: str = "first_order"
    kv: np.ndarray = field(default_factory=lambda: np.full(5, 16.7))
    natural_frequency_hz: float = 150.0
    damping: float = 1.0

    def __post_init__(self):
        self.kv = np.asarray(self.kv, dtype=float)
        if self.mode not in ("ideal", "first_order", "second_order"):
            raise ValueError(f"unknown servo mode {self.mode!r}")
        if self.kv.shape != (5,):
            raise ValueError("kv must have 5 entries")
        if self.mode == "first_order" and np.any(self.kv <= 0.0):
            raise ValueError("Kv must be positive")
        if self.mode == "second_order":
            if not 0.0 < self.damping <= 2.0:
                raise ValueError("damping must be in (0, 2]")
            if self.natural_frequency_hz <= 0.0:
                raise ValueError("natural frequency must be positive")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "kv_per_s": self.kv.tolist(),
                "natural_frequency_hz": self.natural_frequency_hz,
                "damping": self.damping}

    @classmethod
    def from_dict(cls, d: dict) -> "ServoParams":
        return cls(mode=d.get("mode", "first_order"),
                   kv=np.asarray(d.get("kv_per_s", [16.7] * 5)),
                   natural_frequency_hz=d.get("natural_frequency_hz", 150.0),
                   damping=d.get("damping", 1.0))


def _first_order_track(u, kv, dt):
    """Exact response of y' = kv (u - y) to piecewise-linear input."""
    alpha = math.exp(-kv * dt)
    beta = 1.0 - alpha
    gamma = dt - beta / kv
    r = np.zeros_like(u)
    r[:-1] = np.diff(u) / dt
    shifted = u - u[0]
    drive = beta * shifted + gamma * r
    y = lfilter([0.0, 1.0], [1.0, -alpha], drive)
    return y + u[0]


def _second_order_track(u, omega, zeta, dt):
    """Exact response of p'' + 2 zeta omega p' + omega^2 p =
    omega^2 u + 2 zeta omega u' to piecewise-linear input.

    The velocity feedforward (the u' term) removes ramp-following error
    and low-frequency group delay, so clock-offset estimates are not
    polluted by servo lag.
    """
    M = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [-omega ** 2, -2 * zeta * omega, omega ** 2, 2 * zeta * omega],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0],
    ])
    phi = expm(M * dt)
    A2, B2 = phi[:2, :2], phi[:2, 2:]
    r = np.zeros_like(u)
    r[:-1] = np.diff(u) / dt
    shifted = u - u[0]
    num_u, den = ss2tf(A2, B2[:, :1], np.array([[1.0, 0.0]]),
                       np.array([[0.0]]))
    num_r, _ = ss2tf(A2, B2[:, 1:], np.array([[1.0, 0.0]]), np.array([[0.0]]))
    y = lfilter(num_u[0], den, shifted) + lfilter(num_r[0], den, r)
    return y + u[0]


def servo_response(inputs: SignalSet, servo: ServoParams) -> SignalSet:
    """Encoder readback for given controller setpoints.

    Starts exactly on the first setpoint; linear and time-invariant per
    axis, so superposed inputs produce superposed responses.
    """
    dt = 1.0 / inputs.rate_hz
    out = {}
    for i, name in enumerate(AXIS_NAMES):
        u = inputs.channels[name]
        if servo.mode == "ideal":
            out[name] = u.copy()
        elif servo.mode == "first_order":
            out[name] = _first_order_track(u, float(servo.kv[i]), dt)
        else:
            omega = 2 * math.pi * servo.natural_frequency_hz
            out[name] = _second_order_track(u, omega, servo.damping, dt)
    return SignalSet(rate_hz=inputs.rate_hz, start_s=inputs.start_s,
                     channels=out)


@dataclass
class MotionTerm:
    """One smooth axis-position-dependent error contribution."""

    axis: str
    direction: np.ndarray
    amplitude_um: float
    period_units: float  # mm for linear axes, degrees for rotary ones
    phase_rad: float = 0.0

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float)
        if self.axis not in AXIS_NAMES:
            raise ValueError(f"unknown axis {self.axis!r}")
        if self.direction.shape != (3,):
            raise ValueError("direction must be a 3-vector")
        if self.amplitude_um < 0.0:
            raise ValueError("amplitude must be nonnegative")
        if self.period_units <= 0.0:
            raise ValueError("period must be positive")

    def evaluate_mm(self, axis_positions):
        period = self.period_units
        if self.axis in ("A", "C"):
            period = period * RAD_PER_DEG
        wave = np.sin(2 * math.pi * axis_positions / period + self.phase_rad)
        return (self.amplitude_um * 1e-3) * wave[:, None] * self.direction

    def to_dict(self) -> dict:
        return {"axis": self.axis, "direction": self.direction.tolist(),
                "amplitude_um": self.amplitude_um,
                "period_units": self.period_units,
                "phase_rad": self.phase_rad}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionTerm":
        return cls(axis=d["axis"], direction=np.asarray(d["direction"]),
                   amplitude_um=d["amplitude_um"],
                   period_units=d["period_units"],
                   phase_rad=d.get("phase_rad", 0.0))


@dataclass
class StructureParams:
    """True machine imperfections for one session."""

    dq_true: np.ndarray = field(default_factory=lambda: np.zeros(8))
    motion_terms: list = field(default_factory=list)
    drift_um: np.ndarray = field(default_factory=lambda: np.zeros(3))
    compliance_um_per_m_s2: dict = field(default_factory=dict)
    compliance_um_per_rad_s2: dict = field(default_factory=dict)
    noise_um: float = 0.4
    accel_window_s: float = 0.005

    def __post_init__(self):
        self.dq_true = np.asarray(self.dq_true, dtype=float)
        self.drift_um = np.asarray(self.drift_um, dtype=float)
        if self.dq_true.shape != (8,):
            raise ValueError("dq_true must have 8 entries")
        if self.drift_um.shape != (3,):
            raise ValueError("drift must be a 3-vector")
        if self.noise_um < 0.0:
            raise ValueError("noise level must be nonnegative")
        for table, axes in ((self.compliance_um_per_m_s2, ("X", "Y", "Z")),
                            (self.compliance_um_per_rad_s2, ("A", "C"))):
            for ax, vec in table.items():
                if ax not in axes:
                    raise ValueError(f"compliance axis {ax!r} invalid here")
                table[ax] = np.asarray(vec, dtype=float)
                if table[ax].shape != (3,):
                    raise ValueError(f"compliance gain for {ax} must be 3-vector")

    def to_dict(self) -> dict:
        return {
            "link_errors": link_errors_to_dict(self.dq_true),
            "motion_terms": [t.to_dict() for t in self.motion_terms],
            "drift_um": self.drift_um.tolist(),
            "compliance_um_per_m_s2": {k: v.tolist() for k, v in
                                       self.compliance_um_per_m_s2.items()},
            "compliance_um_per_rad_s2": {k: v.tolist() for k, v in
                                         self.compliance_um_per_rad_s2.items()},
            "noise_um": self.noise_um,
            "accel_window_s": self.accel_window_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructureParams":
        return cls(
            dq_true=link_errors_from_dict(d.get("link_errors", {})),
            motion_terms=[MotionTerm.from_dict(t)
                          for t in d.get("motion_terms", [])],
            drift_um=np.asarray(d.get("drift_um", [0.0, 0.0, 0.0])),
            compliance_um_per_m_s2=dict(d.get("compliance_um_per_m_s2", {})),
            compliance_um_per_rad_s2=dict(d.get("compliance_um_per_rad_s2", {})),
            noise_um=d.get("noise_um", 0.4),
            accel_window_s=d.get("accel_window_s", 0.005))


def _smoothed_acceleration(p, rate_hz, window_s):
    """Moving-average smoothing followed by central second differences."""
    dt = 1.0 / rate_hz
    w = max(1, int(round(window_s * rate_hz)))
    if w % 2 == 0:
        w += 1
    if w > 1:
        padded = np.pad(p, w // 2, mode="edge")
        p = np.convolve(padded, np.full(w, 1.0 / w), mode="valid")
    acc = np.empty_like(p)
    acc[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / dt ** 2
    acc[0], acc[-1] = acc[1], acc[-2]
    return acc


def synthesize_measurement(encoders: SignalSet, structure: StructureParams,
                           geom: MachineGeometry, rng=None,
                           return_components: bool = False):
    """Sensor channels (um) for given actual axis positions.

    The emitted reading is the full tool-to-workpiece deviation at the
    actual pose: the nominal-kinematics part plus link-error, motion,
    drift and acceleration-deflection contributions plus noise.  The
    bookkeeping identity `reading = nominal + link + motion + drift +
    dynamic + noise` holds per sample by construction.
    """
    poses = encoders.joint_matrix()
    n = poses.shape[0]
    nominal = dkt_batch(poses, geom)
    link = dkt_with_errors_batch(poses, geom, structure.dq_true) - nominal

    motion = np.zeros((n, 3))
    for term in structure.motion_terms:
        axis_idx = AXIS_NAMES.index(term.axis)
        motion += term.evaluate_mm(poses[:, axis_idx])

    drift = np.tile(structure.drift_um * 1e-3, (n, 1))

    dynamic = np.zeros((n, 3))
    for ax, gain in structure.compliance_um_per_m_s2.items():
        acc = _smoothed_acceleration(poses[:, AXIS_NAMES.index(ax)],
                                     encoders.rate_hz,
                                     structure.accel_window_s)
        # mm/s^2 -> m/s^2 and um -> mm combine into 1e-6
        dynamic += acc[:, None] * gain * 1e-6
    for ax, gain in structure.compliance_um_per_rad_s2.items():
        acc = _smoothed_acceleration(poses[:, AXIS_NAMES.index(ax)],
                                     encoders.rate_hz,
                                     structure.accel_window_s)
        dynamic += acc[:, None] * gain * 1e-3

    if structure.noise_um > 0.0 and rng is not None:
        noise = rng.normal(0.0, structure.noise_um * 1e-3, (n, 3))
    else:
        noise = np.zeros((n, 3))

    tau = nominal + link + motion + drift + dynamic + noise
    reading = SignalSet(rate_hz=encoders.rate_hz, start_s=encoders.start_s,
                        channels={"s1": tau[:, 0] * 1e3,
                                  "s2": tau[:, 1] * 1e3,
                                  "s3": tau[:, 2] * 1e3})
    if not return_components:
        return reading
    components = {"nominal": nominal, "link": link, "motion": motion,
                  "drift": drift, "dynamic": dynamic, "noise": noise}
    return reading, components


def _delayed(signals: SignalSet, k: int) -> SignalSet:
    """Recording that starts k samples late: the first k rows hold the
    initial value and the last k samples never make it to disk."""
    if k == 0:
        return signals.copy()
    out = {}
    for name, v in signals.channels.items():
        out[name] = np.concatenate([np.full(k, v[0]), v[:-k]])
    return SignalSet(signals.rate_hz, signals.start_s, out)


@dataclass
class CampaignConfig:
    """Everything run_campaign needs, serializable as one JSON file."""

    geometry: MachineGeometry
    program: TrajectoryProgram
    feeds_mm_min: list
    servo: ServoParams
    structure: StructureParams
    drift_per_session_um: list | None = None
    seed: int = 0
    nc_cycle_s: float = 0.003
    sensor_rate_hz: float = 10000.0
    delay_nc_cycles: int = 6

    def __post_init__(self):
        if not self.feeds_mm_min:
            raise ValueError("need at least one feed rate")
        if self.drift_per_session_um is not None:
            if len(self.drift_per_session_um) != len(self.feeds_mm_min):
                raise ValueError("drift list must match the feed list")
        if self.delay_nc_cycles < 0:
            raise ValueError("delay must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "program": self.program.to_dict(),
            "feeds_mm_min": list(self.feeds_mm_min),
            "servo": self.servo.to_dict(),
            "structure": self.structure.to_dict(),
            "drift_per_session_um": (
                None if self.drift_per_session_um is None
                else [list(map(float, d)) for d in self.drift_per_session_um]),
            "seed": self.seed,
            "nc_cycle_s": self.nc_cycle_s,
            "sensor_rate_hz": self.sensor_rate_hz,
            "delay_nc_cycles": self.delay_nc_cycles,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        return cls(
            geometry=MachineGeometry.from_dict(d["geometry"]),
            program=TrajectoryProgram.from_dict(d["program"]),
            feeds_mm_min=list(d["feeds_mm_min"]),
            servo=ServoParams.from_dict(d.get("servo", {})),
            structure=StructureParams.from_dict(d.get("structure", {})),
            drift_per_session_um=d.get("drift_per_session_um"),
            seed=d.get("seed", 0),
            nc_cycle_s=d.get("nc_cycle_s", 0.003),
            sensor_rate_hz=d.get("sensor_rate_hz", 10000.0),
            delay_nc_cycles=d.get("delay_nc_cycles", 6))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def session_id_for_feed(feed: float) -> str:
    return f"F{int(round(feed)):05d}"


@dataclass
class SessionRecord:
    session_id: str
    feed_mm_min: float
    directory: Path
    ok: bool
    error: str = ""


def simulate_session(config: CampaignConfig, index: int, out_dir) -> dict:
    """Generate one feed-rate session: three CSVs plus ground_truth.json.

    Deterministic for a given (config.seed, index) pair regardless of the
    order sessions are generated in.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feed = config.feeds_mm_min[index]
    rng = np.random.default_rng([config.seed, index])

    prog = config.program.with_feed(feed)
    ctrl, profile = plan_trajectory(prog, config.nc_cycle_s,
                                    return_profile=True)
    for name in ("A", "C"):
        ctrl.channels[name] = snap_angles_to_writable(ctrl.channels[name])
    enc = servo_response(ctrl, config.servo)
    enc = _delayed(enc, config.delay_nc_cycles)
    for name in ("A", "C"):
        enc.channels[name] = snap_angles_to_writable(enc.channels[name])

    structure = config.structure
    if config.drift_per_session_um is not None:
        structure = replace(
            structure,
            drift_um=np.asarray(config.drift_per_session_um[index], dtype=float))

    ctrl10 = resample(ctrl, config.sensor_rate_hz)
    enc10 = resample(enc, config.sensor_rate_hz)
    sensor, parts = synthesize_measurement(enc10, structure, config.geometry,
                                           rng=rng, return_components=True)

    write_signals(ctrl, out_dir / "controller.csv", kind="joint")
    write_signals(enc, out_dir / "encoder.csv", kind="joint")
    write_signals(sensor, out_dir / "sensor.csv", kind="sensor")

    # per-sample truth on the sensor clock; the contouring row pairs the
    # actual pose with the controller pose recorded delay samples earlier
    k10 = int(round(config.delay_nc_cycles * config.nc_cycle_s
                    * config.sensor_rate_hz))
    ctrl_dev = dkt_batch(ctrl10.joint_matrix(), config.geometry)
    n10 = enc10.n
    ctrl_idx = np.maximum(np.arange(n10) - k10, 0)
    contouring = parts["nominal"] - ctrl_dev[ctrl_idx]

    truth = {
        "feed_mm_min": feed,
        "seed": config.seed,
        "session_index": index,
        "delay_true_s": config.delay_nc_cycles * config.nc_cycle_s,
        "lead_samples_hint": k10,
        "rate_hz": config.sensor_rate_hz,
        "link_errors": link_errors_to_dict(structure.dq_true),
        "drift_um": structure.drift_um.tolist(),
        "noise_um": structure.noise_um,
        "junction_times_s": profile.junction_times_s,
        "path_interval_s": [profile.path_start_s, profile.path_end_s],
        "contouring_mm": contouring.tolist(),
        "link_mm": parts["link"].tolist(),
        "motion_mm": parts["motion"].tolist(),
        "drift_mm": parts["drift"].tolist(),
        "dynamic_mm": parts["dynamic"].tolist(),
        "noise_mm": parts["noise"].tolist(),
        "nominal_mm": parts["nominal"].tolist(),
    }
    (out_dir / "ground_truth.json").write_text(json.dumps(truth) + "\n")
    return truth


def _session_job(config: CampaignConfig, index: int, sdir: str) -> str:
    """One session for the process pool; returns "" or the error text."""
    try:
        simulate_session(config, index, sdir)
        return ""
    except Exception as exc:
        return f"{type(exc).__name__}: {exc}"


def write_campaign_manifest(config: CampaignConfig, records, out_root):
    """manifest.json: session table, reference pick, shared file names."""
    ok_records = [r for r in records if r.ok]
    reference = min(ok_records, key=lambda r: r.feed_mm_min, default=None)
    manifest = {
        "sessions": [{"id": r.session_id, "feed_mm_min": r.feed_mm_min,
                      "dir": r.session_id, "ok": r.ok, "error": r.error}
                     for r in records],
        "reference": reference.session_id if reference else None,
        "geometry": "geometry.json",
        "calibration": "calibration.json",
        "seed": config.seed,
        "nc_cycle_s": config.nc_cycle_s,
        "sensor_rate_hz": config.sensor_rate_hz,
        "delay_nc_cycles": config.delay_nc_cycles,
    }
    (Path(out_root) / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n")


def run_campaign(config: CampaignConfig, out_root, jobs: int = 1) -> list:
    """All sessions plus manifest, geometry and calibration files.

    A failing session is recorded and skipped; the remaining feeds still
    run.  Sessions are seeded independently by (config.seed, index), so
    running them in parallel (jobs > 1) produces the same bytes as the
    sequential order.  Returns the list of SessionRecord.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    config.geometry.save(out_root / "geometry.json")
    SensorCalibration.identity().save(out_root / "calibration.json")

    dirs = [out_root / session_id_for_feed(f) for f in config.feeds_mm_min]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            errors = list(pool.map(
                _session_job, [config] * len(dirs), range(len(dirs)),
                [str(d) for d in dirs]))
    else:
        errors = [_session_job(config, i, str(d))
                  for i, d in enumerate(dirs)]

    records = [
        SessionRecord(session_id_for_feed(feed), feed, dirs[i],
                      ok=(err == ""), error=err)
        for i, (feed, err) in enumerate(zip(config.feeds_mm_min, errors))]
    write_campaign_manifest(config, records, out_root)
    return records
