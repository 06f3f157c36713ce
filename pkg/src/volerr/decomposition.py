"""Splitting measured volumetric error into attributable contributions.

Given three aligned deviation matrices (measured chi, encoder-implied
chi_enc, controller-implied chi_nom, all n x 3 mm) the total error
chi - chi_nom is decomposed into

    contouring       chi_enc - chi_nom       (servo following behavior)
    link geometric   J(pose) @ dq            (axis squareness / offset)
    motion geometric polynomials of t_n      (smooth travel-dependent part)
    thermal drift    constant per session    (offset from reference state)
    dynamic          whatever remains        (acceleration-driven, zero mean)

and the five parts sum back to chi - chi_nom exactly, whatever the model
quality.  A designated low-feed reference session supplies the identified
link errors and the motion polynomials; every other session reuses them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import Legendre, Polynomial
from numpy.polynomial import legendre as npleg

from .kinematics import (
    LINK_ERROR_NAMES,
    RAD_PER_DEG,
    LinkIdentification,
    MachineGeometry,
    dkt_batch,
    identify_link_errors,
    link_errors_from_dict,
    link_errors_to_dict,
    link_jacobian_batch,
)
from .signal_io import (
    SensorCalibration,
    SignalSet,
    estimate_delay,
    load_signals,
    project_sensor_readings,
    resample,
)

DEFAULT_MOTION_DEGREE = 20

CONTRIBUTION_FILES = {
    "contouring": "contouring.csv",
    "link_geometric": "link.csv",
    "motion_geometric": "motion.csv",
    "thermal_drift": "thermal.csv",
    "dynamic": "dynamic.csv",
}


class StageError(RuntimeError):
    """Failure inside one named stage of the session pipeline."""

    def __init__(self, stage: str, original: Exception):
        super().__init__(f"stage {stage!r}: {original}")
        self.stage = stage
        self.original = original


def path_parameter(n: int):
    """The n-point uniform grid on [0, 1] every session is indexed by."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    return np.linspace(0.0, 1.0, n)


def _as_deviation(m, name):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[1] != 3:
        raise ValueError(f"{name} must be (n, 3), got {m.shape}")
    return m


def _check_same_rows(**matrices):
    rows = {k: v.shape[0] for k, v in matrices.items()}
    if len(set(rows.values())) > 1:
        raise ValueError(f"row counts differ: {rows}")


@dataclass
class MotionPolynomialModel:
    """Three polynomials of the normalized path parameter, one per axis.

    Coefficients are kept in the Legendre basis mapped onto [0, 1]; a
    degree-20 fit is routine there while plain monomial normal equations
    are numerically unusable.  Monomial coefficients (ascending powers of
    t_n) are derived on demand for export.
    """

    degree: int
    coefficients: np.ndarray  # (3, degree + 1), Legendre basis on [0, 1]

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (3, self.degree + 1):
            raise ValueError(
                f"need (3, {self.degree + 1}) coefficients, "
                f"got {self.coefficients.shape}")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("coefficients must be finite")

    @classmethod
    def zero(cls, degree: int = DEFAULT_MOTION_DEGREE) -> "MotionPolynomialModel":
        return cls(degree=degree, coefficients=np.zeros((3, degree + 1)))

    def evaluate_at(self, t_n):
        """Evaluate all three polynomials at arbitrary t_n values, (m, 3) mm."""
        x = 2.0 * np.asarray(t_n, dtype=float) - 1.0
        return np.stack([npleg.legval(x, c) for c in self.coefficients], axis=-1)

    def monomial_coefficients(self):
        """(3, degree + 1) ascending monomial coefficients in t_n."""
        out = np.zeros((3, self.degree + 1))
        for i, c in enumerate(self.coefficients):
            poly = Legendre(c, domain=[0.0, 1.0]).convert(
                domain=[0.0, 1.0], kind=Polynomial, window=[0.0, 1.0])
            out[i, : len(poly.coef)] = poly.coef
        return out

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "basis": "legendre_on_unit_interval",
            "legendre_coefficients_mm": self.coefficients.tolist(),
            "monomial_coefficients_mm": self.monomial_coefficients().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionPolynomialModel":
        return cls(degree=int(d["degree"]),
                   coefficients=np.asarray(d["legendre_coefficients_mm"]))


def contouring_errors(chi_enc, chi_nom):
    """Deviation the servo loop adds on top of the programmed path."""
    chi_enc = _as_deviation(chi_enc, "chi_enc")
    chi_nom = _as_deviation(chi_nom, "chi_nom")
    _check_same_rows(chi_enc=chi_enc, chi_nom=chi_nom)
    return chi_enc - chi_nom


def link_contribution(joints, dq, geom: MachineGeometry):
    """Per-sample deviation explained by the eight link errors."""
    dq = np.asarray(dq, dtype=float)
    if dq.shape != (len(LINK_ERROR_NAMES),):
        raise ValueError(f"dq must have {len(LINK_ERROR_NAMES)} entries")
    jac = link_jacobian_batch(np.asarray(joints, dtype=float), geom)
    return jac @ dq


def fit_motion_polynomials(residual, degree: int = DEFAULT_MOTION_DEGREE,
                           robust: bool = False,
                           robust_iterations: int = 3) -> MotionPolynomialModel:
    """Least-squares polynomial fit of a residual against the path parameter.

    The fit acts as a low-pass filter: smooth travel-dependent error is
    captured while short spikes stay in the fit residual.  With robust=True
    a few reweighting passes shrink the influence of such spikes further;
    plain least squares is the default.
    """
    residual = _as_deviation(residual, "residual")
    n = residual.shape[0]
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if degree >= n - 1:
        raise ValueError(f"degree {degree} needs more than {degree + 1} samples, got {n}")
    t_n = path_parameter(n)
    x = 2.0 * t_n - 1.0
    coeffs = np.zeros((3, degree + 1))
    for i in range(3):
        y = residual[:, i]
        w = None
        for _ in range(robust_iterations if robust else 1):
            c = npleg.legfit(x, y, degree, w=w)
            if not robust:
                break
            r = y - npleg.legval(x, c)
            scale = np.median(np.abs(r - np.median(r)))
            if scale <= 0.0:
                break
            w = 1.0 / np.sqrt(1.0 + (r / (3.0 * scale)) ** 2)
        coeffs[i] = c
    model = MotionPolynomialModel(degree=degree, coefficients=coeffs)
    return model


def motion_contribution(model: MotionPolynomialModel, n: int):
    """Evaluate the motion polynomials on a session's own n-point grid."""
    return model.evaluate_at(path_parameter(n))


def thermal_offset(chi, chi_enc, link_part, motion_part):
    """Session-constant offset from the reference thermal state.

    Returns (td, dtd): the column means of what link and motion models do
    not explain, and that vector repeated on every row.
    """
    chi = _as_deviation(chi, "chi")
    chi_enc = _as_deviation(chi_enc, "chi_enc")
    link_part = _as_deviation(link_part, "link_part")
    motion_part = _as_deviation(motion_part, "motion_part")
    _check_same_rows(chi=chi, chi_enc=chi_enc, link_part=link_part,
                     motion_part=motion_part)
    td = np.mean(chi - chi_enc - link_part - motion_part, axis=0)
    return td, np.tile(td, (chi.shape[0], 1))


def dynamic_errors(chi, chi_enc, link_part, motion_part, thermal_part):
    """Whatever the quasi-static models leave unexplained; zero column mean."""
    chi = _as_deviation(chi, "chi")
    chi_enc = _as_deviation(chi_enc, "chi_enc")
    link_part = _as_deviation(link_part, "link_part")
    motion_part = _as_deviation(motion_part, "motion_part")
    thermal_part = _as_deviation(thermal_part, "thermal_part")
    _check_same_rows(chi=chi, chi_enc=chi_enc, link_part=link_part,
                     motion_part=motion_part, thermal_part=thermal_part)
    return chi - chi_enc - link_part - motion_part - thermal_part


@dataclass
class ReferenceArtifacts:
    """What a reference session hands to every other session."""

    link_errors: np.ndarray
    motion_model: MotionPolynomialModel
    identification: LinkIdentification | None = None

    def to_dict(self) -> dict:
        d = {
            "link_errors": link_errors_to_dict(self.link_errors),
            "motion_model": self.motion_model.to_dict(),
        }
        if self.identification is not None:
            d["identification"] = {
                "condition": self.identification.condition,
                "stderr": link_errors_to_dict(self.identification.stderr),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceArtifacts":
        return cls(link_errors=link_errors_from_dict(d["link_errors"]),
                   motion_model=MotionPolynomialModel.from_dict(d["motion_model"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ReferenceArtifacts":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Decomposition:
    """Full decomposition of one session's volumetric error."""

    feed_mm_min: float
    delay_s: float
    contouring: np.ndarray
    link_geometric: np.ndarray
    motion_geometric: np.ndarray
    thermal_drift: np.ndarray
    dynamic: np.ndarray
    link_errors: np.ndarray
    motion_model: MotionPolynomialModel
    thermal_offset_mm: np.ndarray
    rate_hz: float = 0.0
    sensor_delay_s: float = 0.0
    lead_samples: int = 0
    is_reference: bool = False
    artifacts: "ReferenceArtifacts | None" = None

    def __post_init__(self):
        _check_same_rows(contouring=self.contouring,
                         link_geometric=self.link_geometric,
                         motion_geometric=self.motion_geometric,
                         thermal_drift=self.thermal_drift,
                         dynamic=self.dynamic)

    @property
    def n(self) -> int:
        return self.contouring.shape[0]

    def contributions(self) -> dict:
        return {
            "contouring": self.contouring,
            "link_geometric": self.link_geometric,
            "motion_geometric": self.motion_geometric,
            "thermal_drift": self.thermal_drift,
            "dynamic": self.dynamic,
        }

    def reconstruction(self):
        """Sum of all five parts; equals chi - chi_nom by construction."""
        return (self.contouring + self.link_geometric + self.motion_geometric
                + self.thermal_drift + self.dynamic)


def decompose_deviations(chi, chi_enc, chi_nom, enc_joints, geom: MachineGeometry,
                         reference: ReferenceArtifacts | None = None,
                         degree: int = DEFAULT_MOTION_DEGREE,
                         feed_mm_min: float = 0.0, delay_s: float = 0.0,
                         rate_hz: float = 0.0, sensor_delay_s: float = 0.0,
                         lead_samples: int = 0,
                         robust: bool = False,
                         cond_threshold: float = 1e8) -> Decomposition:
    """Decompose aligned deviation matrices.

    With reference=None this session becomes the reference: link errors are
    identified from chi - chi_enc, motion polynomials are fitted on what the
    link model leaves, and the thermal offset is zero by definition.  With
    artifacts supplied, link errors and the motion model are reused and only
    the thermal offset is re-estimated.
    """
    chi = _as_deviation(chi, "chi")
    chi_enc = _as_deviation(chi_enc, "chi_enc")
    chi_nom = _as_deviation(chi_nom, "chi_nom")
    enc_joints = np.asarray(enc_joints, dtype=float)
    _check_same_rows(chi=chi, chi_enc=chi_enc, chi_nom=chi_nom)
    if enc_joints.shape[0] != chi.shape[0]:
        raise ValueError("encoder poses and deviation matrices disagree on n")
    n = chi.shape[0]

    dc = contouring_errors(chi_enc, chi_nom)

    if reference is None:
        if n < 2 * (degree + 1):
            raise ValueError(
                f"reference session needs at least {2 * (degree + 1)} samples, got {n}")
        ident = identify_link_errors(enc_joints, chi - chi_enc, geom,
                                     cond_threshold=cond_threshold)
        dq = ident.dq
        dl = link_contribution(enc_joints, dq, geom)
        model = fit_motion_polynomials(chi - chi_enc - dl, degree=degree,
                                       robust=robust)
        dm = motion_contribution(model, n)
        td = np.zeros(3)
        dtd = np.zeros((n, 3))
        artifacts = ReferenceArtifacts(link_errors=dq, motion_model=model,
                                       identification=ident)
    else:
        dq = np.asarray(reference.link_errors, dtype=float)
        model = reference.motion_model
        dl = link_contribution(enc_joints, dq, geom)
        dm = motion_contribution(model, n)
        td, dtd = thermal_offset(chi, chi_enc, dl, dm)
        artifacts = None

    dd = dynamic_errors(chi, chi_enc, dl, dm, dtd)
    return Decomposition(
        feed_mm_min=feed_mm_min, delay_s=delay_s,
        contouring=dc, link_geometric=dl, motion_geometric=dm,
        thermal_drift=dtd, dynamic=dd,
        link_errors=dq, motion_model=model, thermal_offset_mm=td,
        rate_hz=rate_hz, sensor_delay_s=sensor_delay_s,
        lead_samples=lead_samples,
        is_reference=reference is None, artifacts=artifacts)


@dataclass
class DecomposeConfig:
    """Knobs of the session pipeline."""

    degree: int = DEFAULT_MOTION_DEGREE
    target_rate_hz: float = 10000.0
    delay_method: str = "xcorr"
    delay_window_s: float = 0.05
    onset_threshold: float = 5e-4
    cond_threshold: float = 1e8
    robust_motion_fit: bool = False


def _deviation_signalset(dev, rate_hz, start_s=0.0) -> SignalSet:
    return SignalSet(rate_hz=rate_hz, start_s=start_s, channels={
        "dx": dev[:, 0].copy(), "dy": dev[:, 1].copy(), "dz": dev[:, 2].copy()})


def _sync_feature_window(poses, rate_hz, min_dwell_s=0.02, pad_s=0.06):
    """Index range around the leading synchronization move, if present.

    Looks for the first excursion away from the initial pose that returns
    to it and holds still (the tag-move pattern: dwell, bump, dwell).
    Restricting delay estimation to this range matters because the tag
    moves a single linear axis, so the sensor reading there differs from
    the encoder-implied deviation only by a constant; correlating the
    full trace instead lets the trajectory-dependent error content bias
    the lag.  Returns None when no such pattern exists.
    """
    scaled = poses * np.array([1.0, 1.0, 1.0, 1.0 / RAD_PER_DEG,
                               1.0 / RAD_PER_DEG])
    moving = np.max(np.abs(scaled - scaled[0]), axis=1) > 1e-5
    if not moving.any():
        return None
    i_a = int(np.argmax(moving))
    still = ~moving[i_a:]
    run = int(round(min_dwell_s * rate_hz))
    if run < 1 or len(still) < run:
        return None
    holds = np.convolve(still.astype(float), np.ones(run), mode="valid")
    starts = np.flatnonzero(holds >= run - 0.5)
    if len(starts) == 0:
        return None
    i_b = i_a + int(starts[0])
    pad = int(round(pad_s * rate_hz))
    return max(0, i_a - pad), i_b + pad


def _head_offsets(k: int):
    """Start indices pairing reference[i + a] with target[i + b] for lag k."""
    return (0, k) if k >= 0 else (-k, 0)


def decompose_session(controller: SignalSet, encoder: SignalSet,
                      sensor: SignalSet, geom: MachineGeometry,
                      cal: SensorCalibration,
                      reference: ReferenceArtifacts | None = None,
                      config: DecomposeConfig | None = None,
                      feed_mm_min: float = 0.0) -> Decomposition:
    """Run the full per-session pipeline on in-memory streams.

    Two clock offsets are estimated and removed at one-sample resolution:
    the recording delay of the encoder readback behind the controller
    inputs (cross-correlation of the joint channels; assumes the recording
    offset dominates any servo group delay, which holds for feedforward-
    compensated drives), then the offset of the sensor stream against the
    aligned encoder-implied deviation.  Any failure is re-raised as
    StageError naming the stage.
    """
    cfg = config or DecomposeConfig()
    rate = cfg.target_rate_hz

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    ctrl10 = stage("resample", resample, controller, rate)
    enc10 = stage("resample", resample, encoder, rate)
    if abs(sensor.rate_hz - rate) > 1e-6 * rate:
        sensor = stage("resample", resample, sensor, rate)

    delay_enc = stage("synchronize", estimate_delay, ctrl10, enc10,
                      search_window_s=cfg.delay_window_s,
                      method=cfg.delay_method,
                      onset_threshold=cfg.onset_threshold)
    k_enc = int(round(delay_enc * rate))
    ctrl_start, enc_start = _head_offsets(k_enc)
    n1 = min(ctrl10.n - ctrl_start, enc10.n - enc_start)
    if n1 < 2:
        raise StageError("synchronize",
                         ValueError("no overlap after encoder alignment"))
    ctrl_poses = ctrl10.joint_matrix()[ctrl_start:ctrl_start + n1]
    enc_poses = enc10.joint_matrix()[enc_start:enc_start + n1]

    chi_nom = stage("deviation", dkt_batch, ctrl_poses, geom)
    chi_enc = stage("deviation", dkt_batch, enc_poses, geom)
    chi_raw = stage("project", project_sensor_readings, sensor, cal)

    # correlate sample-to-sample increments, not raw deviations: the raw
    # trajectory-shaped signal has a broad correlation peak that sensor
    # noise can shift by several samples, while the increments are
    # dominated by sharp transients (the tag move, corner blends) that
    # pin the lag exactly
    window = _sync_feature_window(ctrl_poses, rate,
                                  pad_s=cfg.delay_window_s + 0.01)
    if window is not None:
        lo, hi = window
        hi = min(hi, n1, chi_raw.shape[0])
        if hi - lo < int(0.05 * rate):
            window = None
    if window is not None:
        enc_view, raw_view = chi_enc[lo:hi], chi_raw[lo:hi]
    else:
        enc_view, raw_view = chi_enc, chi_raw
    delay_sens = stage(
        "synchronize", estimate_delay,
        _deviation_signalset(np.diff(enc_view, axis=0), rate),
        _deviation_signalset(np.diff(raw_view, axis=0), rate),
        search_window_s=cfg.delay_window_s, method=cfg.delay_method,
        onset_threshold=cfg.onset_threshold)
    k_sens = int(round(delay_sens * rate))
    joint_start, sens_start = _head_offsets(k_sens)
    n = min(n1 - joint_start, chi_raw.shape[0] - sens_start)
    if n < 2:
        raise StageError("synchronize",
                         ValueError("no overlap after sensor alignment"))
    chi = chi_raw[sens_start:sens_start + n]
    chi_nom = chi_nom[joint_start:joint_start + n]
    chi_enc = chi_enc[joint_start:joint_start + n]
    enc_poses = enc_poses[joint_start:joint_start + n]

    return stage(
        "decompose", decompose_deviations,
        chi, chi_enc, chi_nom, enc_poses, geom,
        reference=reference, degree=cfg.degree, feed_mm_min=feed_mm_min,
        delay_s=delay_enc, rate_hz=rate, sensor_delay_s=delay_sens,
        lead_samples=sens_start,
        robust=cfg.robust_motion_fit, cond_threshold=cfg.cond_threshold)


def decompose_files(session_dir, geom: MachineGeometry,
                    cal: SensorCalibration | None = None,
                    reference: ReferenceArtifacts | None = None,
                    config: DecomposeConfig | None = None,
                    feed_mm_min: float = 0.0) -> Decomposition:
    """Load controller.csv, encoder.csv and sensor.csv from a session
    directory and decompose them."""
    session_dir = Path(session_dir)

    def load(name, kind):
        try:
            return load_signals(session_dir / name, kind)
        except Exception as exc:
            raise StageError("load", exc) from exc

    controller = load("controller.csv", "joint")
    encoder = load("encoder.csv", "joint")
    sensor = load("sensor.csv", "sensor")
    if cal is None:
        cal_path = session_dir / "calibration.json"
        cal = (SensorCalibration.load(cal_path) if cal_path.exists()
               else SensorCalibration.identity())
    return decompose_session(controller, encoder, sensor, geom, cal,
                             reference=reference, config=config,
                             feed_mm_min=feed_mm_min)


def write_decomposition(decomp: Decomposition, out_dir):
    """Serialize a decomposition: one CSV per contribution plus summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rate = decomp.rate_hz if decomp.rate_hz > 0 else 1.0
    t = np.arange(decomp.n) / rate
    for key, fname in CONTRIBUTION_FILES.items():
        dev_um = decomp.contributions()[key] * 1e3
        np.savetxt(out_dir / fname, np.column_stack([t, dev_um]),
                   fmt="%.17g", delimiter=",",
                   header="t_s,dx_um,dy_um,dz_um", comments="")
    summary = {
        "feed_mm_min": decomp.feed_mm_min,
        "delay_s": decomp.delay_s,
        "sensor_delay_s": decomp.sensor_delay_s,
        "rate_hz": decomp.rate_hz,
        "lead_samples": decomp.lead_samples,
        "n_samples": decomp.n,
        "is_reference": decomp.is_reference,
        "link_errors": link_errors_to_dict(decomp.link_errors),
        "motion_model": decomp.motion_model.to_dict(),
        "thermal_offset_um": (decomp.thermal_offset_mm * 1e3).tolist(),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def read_decomposition(out_dir) -> Decomposition:
    """Load what write_decomposition produced."""
    out_dir = Path(out_dir)
    summary = json.loads((out_dir / "summary.json").read_text())
    parts = {}
    for key, fname in CONTRIBUTION_FILES.items():
        data = np.loadtxt(out_dir / fname, delimiter=",", skiprows=1, ndmin=2)
        parts[key] = data[:, 1:4] * 1e-3
    model = MotionPolynomialModel.from_dict(summary["motion_model"])
    return Decomposition(
        feed_mm_min=summary["feed_mm_min"], delay_s=summary["delay_s"],
        contouring=parts["contouring"], link_geometric=parts["link_geometric"],
        motion_geometric=parts["motion_geometric"],
        thermal_drift=parts["thermal_drift"], dynamic=parts["dynamic"],
        link_errors=link_errors_from_dict(summary["link_errors"]),
        motion_model=model,
        thermal_offset_mm=np.asarray(summary["thermal_offset_um"]) * 1e-3,
        rate_hz=summary["rate_hz"],
        sensor_delay_s=summary.get("sensor_delay_s", 0.0),
        lead_samples=summary["lead_samples"],
        is_reference=summary["is_reference"])
