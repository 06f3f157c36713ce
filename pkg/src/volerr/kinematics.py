"""Direct kinematics and link-error model of a WCAYFXZT five-axis machine.

Two open branches leave the bed frame F (right handed, axes x, y, z):

    tool branch:   F -> X carriage -> Z ram -> spindle nose -> tool point
    table branch:  F -> Y stage -> A swivel -> C table -> master ball

X travels along x, Z along z, Y along y.  The A swivel axis lies in the
x-z plane of the bed, obtained by rotating z about y by the configured
tilt (45 deg nominal), so a 180 deg A move flips the C table from
horizontal to vertical.  The C axis is the z axis of the A body.  With
this layout the bed y axis is the common normal of the A and C axis
lines, which is what the y_C offset parameter rides on.  A pose is
(X, Y, Z, A, C); millimetres and radians everywhere in memory, degrees
only in files.

The deviation of interest is tau = P_t - P_w, the position of the tool
point relative to the ball center, expressed in the bed frame.

Eight link-error parameters perturb the nominal chain, ordered

    (gamma_Y, alpha_Z, beta_Z, beta_A, gamma_A, alpha_C, beta_C, y_C)

with the following conventions (signs are a convention of this package):

* gamma_Y rotates the Y travel direction about z (X-Y squareness),
* alpha_Z / beta_Z rotate the Z travel direction about x / y
  (Y-Z and X-Z squareness),
* beta_A / gamma_A tilt the A joint axis line about y / z,
* alpha_C / beta_C tilt the C joint axis line about the A-body x / y,
* y_C shifts the C frame origin along the A-body y axis (mm).

Squareness errors act on the travel direction only, so their effect grows
with the axis travel; rotary tilts act through the joint rotation, so
they vanish at A = 0 (respectively C = 0).  That is why identification
needs pose sets that actually exercise A and C.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RAD_PER_DEG = math.pi / 180.0

AXIS_NAMES = ("X", "Y", "Z", "A", "C")

LINK_ERROR_NAMES = (
    "gamma_Y",
    "alpha_Z",
    "beta_Z",
    "beta_A",
    "gamma_A",
    "alpha_C",
    "beta_C",
    "y_C",
)

# angle parameters are stored in radians, y_C in mm; JSON uses urad / um
_LINK_JSON_KEYS = tuple(
    f"{n}_um" if n == "y_C" else f"{n}_urad" for n in LINK_ERROR_NAMES
)

_EX = np.array([1.0, 0.0, 0.0])
_EY = np.array([0.0, 1.0, 0.0])
_EZ = np.array([0.0, 0.0, 1.0])


class RankDeficiencyError(RuntimeError):
    """Raised when the identification system is numerically rank deficient."""


@dataclass(frozen=True)
class JointPose:
    """One machine pose: linear axes in mm, rotary axes in radians."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    a: float = 0.0
    c: float = 0.0

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.a, self.c])

    @classmethod
    def from_array(cls, arr) -> "JointPose":
        x, y, z, a, c = (float(v) for v in arr)
        return cls(x, y, z, a, c)


@dataclass(frozen=True)
class MachineGeometry:
    """Nominal offsets of the WCAYFXZT chain, all in mm.

    Offsets run from each frame origin to the next at the zero pose.
    ``tool_length_mm`` extends from the spindle nose along -z to the tool
    point; ``ball_offset_mm`` locates the master ball in the C frame.
    """

    a_tilt_rad: float = math.radians(45.0)
    bed_to_x: np.ndarray = field(default_factory=lambda: np.zeros(3))
    x_to_z: np.ndarray = field(default_factory=lambda: np.zeros(3))
    z_to_spindle: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bed_to_y: np.ndarray = field(default_factory=lambda: np.zeros(3))
    y_to_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a_to_c: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tool_length_mm: float = 0.0
    ball_offset_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    structure: str = "WCAYFXZT"

    def __post_init__(self):
        for name in ("bed_to_x", "x_to_z", "z_to_spindle", "bed_to_y",
                     "y_to_a", "a_to_c", "ball_offset_mm"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,):
                raise ValueError(f"geometry offset {name} must be a 3-vector")
            object.__setattr__(self, name, v)
        self.validate()

    def validate(self):
        if self.structure != "WCAYFXZT":
            raise ValueError(f"unsupported structure string {self.structure!r}")
        if not 0.0 < self.a_tilt_rad < math.pi / 2.0:
            raise ValueError("A-axis tilt must lie strictly between 0 and 90 deg")
        vals = np.concatenate([
            self.bed_to_x, self.x_to_z, self.z_to_spindle, self.bed_to_y,
            self.y_to_a, self.a_to_c, self.ball_offset_mm,
            [self.tool_length_mm, self.a_tilt_rad],
        ])
        if not np.all(np.isfinite(vals)):
            raise ValueError("geometry contains non-finite values")
        if self.tool_length_mm < 0.0:
            raise ValueError("tool length must be >= 0")

    @property
    def a_axis(self):
        """Unit direction of the A swivel axis in the bed frame."""
        return np.array([math.sin(self.a_tilt_rad), 0.0, math.cos(self.a_tilt_rad)])

    def to_dict(self) -> dict:
        return {
            "structure": self.structure,
            "a_tilt_deg": self.a_tilt_rad / RAD_PER_DEG,
            "offsets_mm": {
                "bed_to_x": self.bed_to_x.tolist(),
                "x_to_z": self.x_to_z.tolist(),
                "z_to_spindle": self.z_to_spindle.tolist(),
                "bed_to_y": self.bed_to_y.tolist(),
                "y_to_a": self.y_to_a.tolist(),
                "a_to_c": self.a_to_c.tolist(),
            },
            "tool_length_mm": self.tool_length_mm,
            "ball_offset_mm": self.ball_offset_mm.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MachineGeometry":
        try:
            off = d["offsets_mm"]
            return cls(
                a_tilt_rad=float(d["a_tilt_deg"]) * RAD_PER_DEG,
                bed_to_x=off["bed_to_x"],
                x_to_z=off["x_to_z"],
                z_to_spindle=off["z_to_spindle"],
                bed_to_y=off["bed_to_y"],
                y_to_a=off["y_to_a"],
                a_to_c=off["a_to_c"],
                tool_length_mm=float(d["tool_length_mm"]),
                ball_offset_mm=d["ball_offset_mm"],
                structure=d.get("structure", "WCAYFXZT"),
            )
        except KeyError as exc:
            raise ValueError(f"geometry JSON missing key {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MachineGeometry":
        return cls.from_dict(json.loads(Path(path).read_text()))


def rotation_about(axis, angle: float):
    """Rodrigues rotation matrix about a unit axis."""
    ax = np.asarray(axis, dtype=float)
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([
        [0.0, -ax[2], ax[1]],
        [ax[2], 0.0, -ax[0]],
        [-ax[1], ax[0], 0.0],
    ])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def _rotate_about(axis, angles, vecs):
    """Apply rotations about one fixed unit axis to vectors, vectorized.

    angles: (n,) radians; vecs: (3,) or (n, 3).  Returns (n, 3).
    """
    ax = np.asarray(axis, dtype=float)
    angles = np.asarray(angles, dtype=float)
    v = np.broadcast_to(np.asarray(vecs, dtype=float), angles.shape + (3,))
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    cross = np.cross(ax, v)
    dot = (v @ ax)[:, None]
    return v * c + cross * s + ax * dot * (1.0 - c)


def _trans(v):
    t = np.eye(4)
    t[:3, 3] = v
    return t


def _rot_h(r):
    t = np.eye(4)
    t[:3, :3] = r
    return t


def _pose_array(pose):
    if isinstance(pose, JointPose):
        return pose.as_array()
    arr = np.asarray(pose, dtype=float)
    if arr.shape != (5,):
        raise ValueError("pose must be a JointPose or a 5-vector (X, Y, Z, A, C)")
    return arr


def _joint_matrix(joints):
    arr = np.asarray(joints, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ValueError("joint array must have shape (n, 5)")
    if not np.all(np.isfinite(arr)):
        raise ValueError("joint array contains non-finite values")
    return arr


def dkt(pose, geom: MachineGeometry):
    """Nominal tool-to-ball deviation tau = P_t - P_w for one pose.

    Composes the two homogeneous-transform branches exactly; no
    small-angle shortcuts.
    """
    x, y, z, a, c = _pose_array(pose)
    t_tool = (
        _trans(geom.bed_to_x)
        @ _trans(x * _EX)
        @ _trans(geom.x_to_z)
        @ _trans(z * _EZ)
        @ _trans(geom.z_to_spindle)
        @ _trans(-geom.tool_length_mm * _EZ)
    )
    t_table = (
        _trans(geom.bed_to_y)
        @ _trans(y * _EY)
        @ _trans(geom.y_to_a)
        @ _rot_h(rotation_about(geom.a_axis, a))
        @ _trans(geom.a_to_c)
        @ _rot_h(rotation_about(_EZ, c))
        @ _trans(geom.ball_offset_mm)
    )
    return t_tool[:3, 3] - t_table[:3, 3]


def dkt_batch(joints, geom: MachineGeometry):
    """Vectorized dkt over an (n, 5) joint array; returns (n, 3)."""
    q = _joint_matrix(joints)
    x, y, z, a, c = (q[:, i] for i in range(5))
    p_t = (
        geom.bed_to_x + geom.x_to_z + geom.z_to_spindle
        - geom.tool_length_mm * _EZ
        + x[:, None] * _EX
        + z[:, None] * _EZ
    )
    ball = _rotate_about(_EZ, c, geom.ball_offset_mm)
    arm = _rotate_about(geom.a_axis, a, geom.a_to_c + ball)
    p_w = geom.bed_to_y + geom.y_to_a + y[:, None] * _EY + arm
    return p_t - p_w


def _link_vector(dq):
    arr = np.asarray(dq, dtype=float)
    if arr.shape != (8,):
        raise ValueError("link error vector must have 8 entries")
    if not np.all(np.isfinite(arr)):
        raise ValueError("link error vector contains non-finite values")
    return arr


def _perturbed_directions(geom: MachineGeometry, dq):
    g_y, a_z, b_z, b_a, g_a, a_c, b_c, _ = dq
    y_dir = rotation_about(_EZ, g_y) @ _EY
    z_dir = rotation_about(_EX, a_z) @ rotation_about(_EY, b_z) @ _EZ
    a_axis = rotation_about(_EZ, g_a) @ rotation_about(_EY, b_a) @ geom.a_axis
    c_axis = rotation_about(_EX, a_c) @ rotation_about(_EY, b_c) @ _EZ
    return y_dir, z_dir, a_axis, c_axis


def dkt_with_errors(pose, geom: MachineGeometry, dq):
    """Deviation tau for one pose under the eight link errors, exact chain."""
    dq = _link_vector(dq)
    x, y, z, a, c = _pose_array(pose)
    y_dir, z_dir, a_axis, c_axis = _perturbed_directions(geom, dq)
    p_t = (
        geom.bed_to_x + x * _EX + geom.x_to_z + z * z_dir
        + geom.z_to_spindle - geom.tool_length_mm * _EZ
    )
    ball = rotation_about(c_axis, c) @ geom.ball_offset_mm
    arm = rotation_about(a_axis, a) @ (geom.a_to_c + dq[7] * _EY + ball)
    p_w = geom.bed_to_y + y * y_dir + geom.y_to_a + arm
    return p_t - p_w


def dkt_with_errors_batch(joints, geom: MachineGeometry, dq):
    """Vectorized dkt_with_errors; returns (n, 3)."""
    dq = _link_vector(dq)
    q = _joint_matrix(joints)
    x, y, z, a, c = (q[:, i] for i in range(5))
    y_dir, z_dir, a_axis, c_axis = _perturbed_directions(geom, dq)
    p_t = (
        geom.bed_to_x + geom.x_to_z + geom.z_to_spindle
        - geom.tool_length_mm * _EZ
        + x[:, None] * _EX
        + z[:, None] * z_dir
    )
    ball = _rotate_about(c_axis, c, geom.ball_offset_mm)
    arm = _rotate_about(a_axis, a, geom.a_to_c + dq[7] * _EY + ball)
    p_w = geom.bed_to_y + geom.y_to_a + y[:, None] * y_dir + arm
    return p_t - p_w


def link_jacobian_batch(joints, geom: MachineGeometry):
    """Sensitivity of tau to the eight link errors at dq = 0, per pose.

    Returns (n, 3, 8).  Columns follow LINK_ERROR_NAMES.  Squareness
    columns are travel times the rotated unit direction; tilt columns come
    from differentiating the conjugated joint rotation R(P u, theta) =
    P R(u, theta) P^T with respect to the perturbation P, which gives
    [u]x R - R [u]x applied to the downstream arm.
    """
    q = _joint_matrix(joints)
    n = q.shape[0]
    x, y, z, a, c = (q[:, i] for i in range(5))

    ball = _rotate_about(_EZ, c, geom.ball_offset_mm)          # R_C p
    v = geom.a_to_c + ball                                     # arm in A body
    rav = _rotate_about(geom.a_axis, a, v)                     # R_A v

    cols = np.empty((n, 3, 8))
    zeros = np.zeros(n)
    cols[:, :, 0] = np.stack([y, zeros, zeros], axis=1)        # +Y x_hat
    cols[:, :, 1] = np.stack([zeros, -z, zeros], axis=1)       # -Z y_hat
    cols[:, :, 2] = np.stack([z, zeros, zeros], axis=1)        # +Z x_hat

    # d tau / d tilt = -([u]x R_A - R_A [u]x) v for u in {y, z}
    cols[:, :, 3] = -(np.cross(_EY, rav) - _rotate_about(geom.a_axis, a, np.cross(_EY, v)))
    cols[:, :, 4] = -(np.cross(_EZ, rav) - _rotate_about(geom.a_axis, a, np.cross(_EZ, v)))

    # C-axis tilts act inside the A body: -R_A ([u]x R_C - R_C [u]x) p
    p = geom.ball_offset_mm
    for j, u in ((5, _EX), (6, _EY)):
        inner = np.cross(u, ball) - _rotate_about(_EZ, c, np.cross(u, p))
        cols[:, :, j] = -_rotate_about(geom.a_axis, a, inner)

    cols[:, :, 7] = -_rotate_about(geom.a_axis, a, _EY)
    return cols


def link_jacobian(pose, geom: MachineGeometry):
    """3x8 link-error Jacobian at one pose (analytic, at dq = 0)."""
    return link_jacobian_batch(_pose_array(pose)[None, :], geom)[0]


@dataclass
class LinkIdentification:
    """Least-squares estimate of the eight link errors."""

    dq: np.ndarray            # (8,) radians / mm
    residuals: np.ndarray     # (n, 3) mm, deviation minus fitted J dq
    condition: float
    stderr: np.ndarray        # (8,) 1-sigma parameter uncertainties
    singular_values: np.ndarray

    def dq_dict(self) -> dict:
        return link_errors_to_dict(self.dq)


def identify_link_errors(joints, deviations, geom: MachineGeometry,
                         cond_threshold: float = 1e8) -> LinkIdentification:
    """Fit the eight link errors to measured deviations over many poses.

    joints: (n, 5); deviations: (n, 3) mm of tau_measured - tau_nominal.
    Solves the stacked 3n x 8 system by SVD so the conditioning is
    explicit; raises RankDeficiencyError when the condition number
    exceeds ``cond_threshold`` (pose set does not separate the
    parameters, e.g. frozen A and C).
    """
    q = _joint_matrix(joints)
    dev = np.asarray(deviations, dtype=float)
    if dev.shape != (q.shape[0], 3):
        raise ValueError(
            f"deviations shape {dev.shape} does not match {q.shape[0]} poses")
    if not np.all(np.isfinite(dev)):
        raise ValueError("deviations contain non-finite values")
    n = q.shape[0]
    if 3 * n < 8:
        raise ValueError("need at least 3 poses to identify 8 parameters")

    jac = link_jacobian_batch(q, geom).reshape(3 * n, 8)
    b = dev.reshape(3 * n)
    u, s, vt = np.linalg.svd(jac, full_matrices=False)
    if s[-1] <= 0.0 or s[0] / s[-1] > cond_threshold:
        cond = math.inf if s[-1] <= 0.0 else s[0] / s[-1]
        raise RankDeficiencyError(
            f"identification system condition {cond:.3g} exceeds "
            f"{cond_threshold:.3g}; vary A and C across the pose set")
    dq = vt.T @ ((u.T @ b) / s)
    resid = (b - jac @ dq).reshape(n, 3)
    dof = max(3 * n - 8, 1)
    sigma2 = float(np.sum(resid ** 2)) / dof
    cov = (vt.T * (sigma2 / s ** 2)) @ vt
    return LinkIdentification(
        dq=dq,
        residuals=resid,
        condition=float(s[0] / s[-1]),
        stderr=np.sqrt(np.diag(cov)),
        singular_values=s,
    )


def link_errors_to_dict(dq) -> dict:
    """Array -> JSON-friendly dict in urad (angles) and um (y_C)."""
    dq = _link_vector(dq)
    out = {}
    for key, val in zip(_LINK_JSON_KEYS, dq):
        out[key] = val * 1e6 if key.endswith("_urad") else val * 1e3
    return out


def link_errors_from_dict(d: dict):
    """JSON dict in urad / um -> internal (8,) array in rad / mm."""
    dq = np.zeros(8)
    for i, key in enumerate(_LINK_JSON_KEYS):
        val = float(d.get(key, 0.0))
        dq[i] = val * 1e-6 if key.endswith("_urad") else val * 1e-3
    unknown = set(d) - set(_LINK_JSON_KEYS)
    if unknown:
        raise ValueError(f"unknown link error keys: {sorted(unknown)}")
    return dq
