"""Loading, resampling, synchronization and projection of recorded signals.

Two CSV layouts are understood:

    joint streams   t_s,X_mm,Y_mm,Z_mm,A_deg,C_deg
    sensor streams  t_s,s1_um,s2_um,s3_um   (or s1_V.. with gain calibration)

Joint angles live in radians once loaded; sensor channels keep the units
of the file.  All streams must be uniformly sampled.  Deviation matrices
are plain (n, 3) float arrays in mm, machine frame, columns x, y, z.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import RAD_PER_DEG, MachineGeometry, dkt_batch

JOINT_COLUMNS = ("t_s", "X_mm", "Y_mm", "Z_mm", "A_deg", "C_deg")
SENSOR_COLUMNS_UM = ("t_s", "s1_um", "s2_um", "s3_um")
SENSOR_COLUMNS_V = ("t_s", "s1_V", "s2_V", "s3_V")

JOINT_CHANNELS = ("X", "Y", "Z", "A", "C")
SENSOR_CHANNELS = ("s1", "s2", "s3")


class SignalLoadError(ValueError):
    """Raised when a signal file fails validation."""


@dataclass
class SignalSet:
    """Uniformly sampled multichannel recording.

    rate_hz is the sampling rate, start_s the time of sample 0; channels
    maps channel name to a 1-D float array, all of equal length.
    """

    rate_hz: float
    start_s: float
    channels: dict

    def __post_init__(self):
        if self.rate_hz <= 0.0:
            raise ValueError("sample rate must be positive")
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise ValueError(f"channel lengths differ: {sorted(lengths)}")

    @property
    def n(self) -> int:
        return len(next(iter(self.channels.values())))

    @property
    def duration_s(self) -> float:
        return (self.n - 1) / self.rate_hz

    def times(self):
        return self.start_s + np.arange(self.n) / self.rate_hz

    def copy(self) -> "SignalSet":
        return SignalSet(self.rate_hz, self.start_s,
                         {k: v.copy() for k, v in self.channels.items()})

    def joint_matrix(self):
        """Stack X, Y, Z, A, C into an (n, 5) pose array."""
        try:
            return np.stack([self.channels[k] for k in JOINT_CHANNELS], axis=1)
        except KeyError as exc:
            raise ValueError(f"missing joint channel {exc}") from exc

    def sensor_matrix(self):
        try:
            return np.stack([self.channels[k] for k in SENSOR_CHANNELS], axis=1)
        except KeyError as exc:
            raise ValueError(f"missing sensor channel {exc}") from exc


def _infer_rate(t, path):
    dt = np.diff(t)
    if len(dt) == 0:
        raise SignalLoadError(f"{path}: need at least 2 samples")
    step = float(np.median(dt))
    if step <= 0.0:
        raise SignalLoadError(f"{path}: time column is not increasing")
    if np.max(np.abs(dt - step)) > 1e-6 * max(step, 1e-9) + 1e-9:
        worst = int(np.argmax(np.abs(dt - step)))
        raise SignalLoadError(
            f"{path}: non-uniform sampling near row {worst + 2} "
            f"(dt {dt[worst]:.9g} vs {step:.9g})")
    return 1.0 / step


def load_signals(path, kind: str) -> SignalSet:
    """Load a joint or sensor CSV; kind is 'joint' or 'sensor'.

    Angle columns are converted to radians.  Raises SignalLoadError naming
    the offending row and column for missing values, non-finite entries or
    a wrong header.
    """
    path = Path(path)
    if kind not in ("joint", "sensor"):
        raise ValueError(f"kind must be 'joint' or 'sensor', got {kind!r}")
    try:
        with path.open() as fh:
            header = fh.readline().strip()
            try:
                data = np.loadtxt(fh, delimiter=",", ndmin=2)
            except ValueError as exc:
                raise SignalLoadError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise SignalLoadError(f"{path}: {exc}") from exc

    cols = tuple(c.strip() for c in header.split(","))
    if kind == "joint":
        if cols != JOINT_COLUMNS:
            raise SignalLoadError(
                f"{path}: expected header {','.join(JOINT_COLUMNS)}, got {header!r}")
    else:
        if cols not in (SENSOR_COLUMNS_UM, SENSOR_COLUMNS_V):
            raise SignalLoadError(
                f"{path}: expected header {','.join(SENSOR_COLUMNS_UM)} or the _V "
                f"variant, got {header!r}")

    if data.shape[0] < 2:
        raise SignalLoadError(f"{path}: need at least 2 samples")
    if data.shape[1] != len(cols):
        raise SignalLoadError(
            f"{path}: rows have {data.shape[1]} fields, header has {len(cols)}")
    bad = ~np.isfinite(data)
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        raise SignalLoadError(
            f"{path}: non-finite value at row {int(r) + 2} column {cols[c]!r}")

    t = data[:, 0]
    rate = _infer_rate(t, path)
    channels = {}
    for i, col in enumerate(cols[1:], start=1):
        name = col.split("_")[0]
        vals = data[:, i].copy()
        if col.endswith("_deg"):
            vals = vals * RAD_PER_DEG
        channels[name] = vals
    return SignalSet(rate_hz=rate, start_s=float(t[0]), channels=channels)


def _deg_with_exact_preimage(rad):
    """Degrees d whose product with pi/180 is as close to rad as doubles allow.

    Conversion to degrees and back rounds twice, and some radian values have
    no degree preimage at all; this searches a few ulps around the naive
    quotient and keeps the candidate with the smallest reconversion error
    (zero whenever a preimage exists, at most one ulp otherwise).
    """
    deg = rad / RAD_PER_DEG
    bad = np.flatnonzero(deg * RAD_PER_DEG != rad)
    for i in bad:
        best, err = deg[i], abs(deg[i] * RAD_PER_DEG - rad[i])
        for toward in (np.inf, -np.inf):
            cand = deg[i]
            for _ in range(3):
                cand = np.nextafter(cand, toward)
                e = abs(cand * RAD_PER_DEG - rad[i])
                if e < err:
                    best, err = cand, e
                if err == 0.0:
                    break
            if err == 0.0:
                break
        deg[i] = best
    return deg


def snap_angles_to_writable(rad):
    """Round radians to the nearest value that survives a CSV round trip.

    The degree column can only represent radians of the form fl(d * pi/180);
    snapping onto that set before synthesis or comparison makes
    load(write(x)) an exact identity.  The adjustment is at most one ulp.
    """
    rad = np.asarray(rad, dtype=float)
    return _deg_with_exact_preimage(rad.copy()) * RAD_PER_DEG


def write_signals(signals: SignalSet, path, kind: str):
    """Write a SignalSet as CSV with 17 significant digits (lossless)."""
    path = Path(path)
    if kind == "joint":
        cols = [signals.times()]
        for name in JOINT_CHANNELS:
            vals = signals.channels[name]
            if name in ("A", "C"):
                vals = _deg_with_exact_preimage(vals)
            cols.append(vals)
        header = ",".join(JOINT_COLUMNS)
    elif kind == "sensor":
        cols = [signals.times()] + [signals.channels[k] for k in SENSOR_CHANNELS]
        header = ",".join(SENSOR_COLUMNS_UM)
    else:
        raise ValueError(f"kind must be 'joint' or 'sensor', got {kind!r}")
    np.savetxt(path, np.column_stack(cols), fmt="%.17g", delimiter=",",
               header=header, comments="")


def resample(signals: SignalSet, target_rate_hz: float) -> SignalSet:
    """Linear-interpolation resampling onto a uniform target clock.

    The target grid starts at the first sample; the last grid point falls
    on the last sample whenever the duration is an integer number of
    target periods, so endpoints are preserved for integer rate ratios.
    Upsampling only: target rate below the source rate is an error.
    """
    if target_rate_hz <= 0.0:
        raise ValueError("target rate must be positive")
    if target_rate_hz < signals.rate_hz * (1.0 - 1e-9):
        raise ValueError(
            f"target rate {target_rate_hz:g} Hz is below the source rate "
            f"{signals.rate_hz:g} Hz; downsampling is not supported")
    if abs(target_rate_hz - signals.rate_hz) <= 1e-9 * target_rate_hz:
        return signals.copy()
    t_src = signals.times()
    duration = t_src[-1] - t_src[0]
    n_new = int(math.floor(duration * target_rate_hz + 1e-6)) + 1
    t_new = signals.start_s + np.arange(n_new) / target_rate_hz
    out = {k: np.interp(t_new, t_src, v) for k, v in signals.channels.items()}
    return SignalSet(rate_hz=target_rate_hz, start_s=signals.start_s, channels=out)


def estimate_delay(reference: SignalSet, target: SignalSet,
                   search_window_s: float = 0.05, channel: str | None = None,
                   method: str = "xcorr",
                   onset_threshold: float = 5e-4) -> float:
    """Delay of ``target`` behind ``reference`` in seconds, one-sample grid.

    method 'xcorr' maximizes the normalized cross-correlation summed over
    the shared channels (or one named channel); method 'onset' compares the
    first sample where the per-sample increment exceeds ``onset_threshold``
    (units of the channel, default 0.5 um on an mm channel).  Positive
    result means the target stream lags the reference.
    """
    if abs(reference.rate_hz - target.rate_hz) > 1e-6 * reference.rate_hz:
        raise ValueError("reference and target must share a sample rate")
    rate = reference.rate_hz
    names = [channel] if channel else [
        k for k in reference.channels if k in target.channels]
    if not names or any(k not in reference.channels or k not in target.channels
                        for k in names):
        raise ValueError(f"no common channel to synchronize on ({names})")

    if method == "onset":
        delays = []
        for k in names:
            r = np.flatnonzero(np.abs(np.diff(reference.channels[k])) > onset_threshold)
            t = np.flatnonzero(np.abs(np.diff(target.channels[k])) > onset_threshold)
            if len(r) and len(t):
                delays.append((t[0] - r[0]) / rate)
        if not delays:
            raise ValueError("no motion onset found above threshold")
        return float(np.median(delays))
    if method != "xcorr":
        raise ValueError(f"unknown delay method {method!r}")

    max_lag = max(1, int(round(search_window_s * rate)))
    lags = np.arange(-max_lag, max_lag + 1)
    score = np.zeros(len(lags))
    any_variance = False
    for k in names:
        r = reference.channels[k]
        t = target.channels[k]
        if np.ptp(r) == 0.0 or np.ptp(t) == 0.0:
            continue
        any_variance = True
        for i, lag in enumerate(lags):
            if lag >= 0:
                a, b = r[: len(r) - lag or None], t[lag:lag + len(r)]
            else:
                a, b = r[-lag:], t[: len(t) + lag or None]
            m = min(len(a), len(b))
            if m < 2:
                continue
            # Pearson correlation over the overlap; demeaning per window
            # keeps a periodic signal from biasing the peak sideways
            a = a[:m] - np.mean(a[:m])
            b = b[:m] - np.mean(b[:m])
            denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
            if denom > 0.0:
                score[i] += float(np.dot(a, b)) / denom
    if not any_variance:
        raise ValueError("synchronization channels carry no motion")
    return float(lags[int(np.argmax(score))] / rate)


def align(signals: SignalSet, delay_s: float) -> SignalSet:
    """Shift a stream backward by an integer-sample delay.

    With positive delay the first round(delay * rate) samples are dropped:
    sample i of the result holds the value recorded at i + k, i.e. the
    event that truly happened at instant start + i / rate.  Negative delay
    drops the tail instead and moves start_s forward accordingly.
    """
    k = int(round(delay_s * signals.rate_hz))
    if abs(k) >= signals.n:
        raise ValueError(f"delay of {k} samples exceeds stream length {signals.n}")
    if k >= 0:
        channels = {name: v[k:].copy() for name, v in signals.channels.items()}
        start = signals.start_s
    else:
        channels = {name: v[:k].copy() for name, v in signals.channels.items()}
        start = signals.start_s + (-k) / signals.rate_hz
    return SignalSet(rate_hz=signals.rate_hz, start_s=start, channels=channels)


def truncate(signals: SignalSet, n: int) -> SignalSet:
    """Keep the first n samples."""
    if not 0 < n <= signals.n:
        raise ValueError(f"cannot truncate length-{signals.n} stream to {n}")
    return SignalSet(signals.rate_hz, signals.start_s,
                     {k: v[:n].copy() for k, v in signals.channels.items()})


def build_nominal_deviation(joints: SignalSet, geom: MachineGeometry):
    """Deviation matrix chi_nom from controller setpoints, (n, 3) mm."""
    return dkt_batch(joints.joint_matrix(), geom)


def build_encoder_deviation(joints: SignalSet, geom: MachineGeometry):
    """Deviation matrix chi_enc from encoder readbacks, (n, 3) mm."""
    return dkt_batch(joints.joint_matrix(), geom)


@dataclass
class SensorCalibration:
    """Mapping from the three displacement sensors to the machine frame.

    ``directions`` rows are the unit measurement directions; a reading
    vector s (um) relates to the deviation tau (um) by s = directions @ tau.
    Gains (um/V) and offsets (um) linearize raw voltage channels; pass
    gain 1 / offset 0 for channels already in um.  ``setup_offset_um`` is
    subtracted from the projected deviation to remove the constant part
    introduced by mounting.
    """

    directions: np.ndarray = field(default_factory=lambda: np.eye(3))
    gains_um_per_v: np.ndarray = field(default_factory=lambda: np.ones(3))
    offsets_um: np.ndarray = field(default_factory=lambda: np.zeros(3))
    setup_offset_um: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cond_threshold: float = 1e3

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=float)
        self.gains_um_per_v = np.asarray(self.gains_um_per_v, dtype=float)
        self.offsets_um = np.asarray(self.offsets_um, dtype=float)
        self.setup_offset_um = np.asarray(self.setup_offset_um, dtype=float)
        if self.directions.shape != (3, 3):
            raise ValueError("directions must be 3x3")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("direction rows must be unit vectors")
        cond = np.linalg.cond(self.directions)
        if cond > self.cond_threshold:
            raise ValueError(
                f"sensor directions are too coplanar (condition {cond:.3g})")

    @classmethod
    def identity(cls) -> "SensorCalibration":
        return cls()

    def to_dict(self) -> dict:
        return {
            "directions": self.directions.tolist(),
            "gains_um_per_v": self.gains_um_per_v.tolist(),
            "offsets_um": self.offsets_um.tolist(),
            "setup_offset_um": self.setup_offset_um.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorCalibration":
        return cls(
            directions=d.get("directions", np.eye(3)),
            gains_um_per_v=d.get("gains_um_per_v", np.ones(3)),
            offsets_um=d.get("offsets_um", np.zeros(3)),
            setup_offset_um=d.get("setup_offset_um", np.zeros(3)),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SensorCalibration":
        return cls.from_dict(json.loads(Path(path).read_text()))


def project_sensor_readings(raw: SignalSet, cal: SensorCalibration):
    """Sensor channels -> deviation matrix chi, (n, 3) mm, machine frame.

    Applies gains and offsets, solves the 3x3 direction system per sample
    and subtracts the setup offset.  Linear in the raw readings.
    """
    s = raw.sensor_matrix() * cal.gains_um_per_v + cal.offsets_um
    tau_um = np.linalg.solve(cal.directions, s.T).T - cal.setup_offset_um
    return tau_um * 1e-3
