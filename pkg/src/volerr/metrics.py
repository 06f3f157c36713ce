"""Summary statistics for decomposed error: shares, extrema, feed-rate law.

Share computation, maxima and RMS are unit-agnostic array operations; the
report builders feed them mm matrices and publish micrometers.  The
feed-rate model is rms = kappa * F ** N fitted per Cartesian direction in
log-log space.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decomposition import Decomposition
from .signal_io import SignalSet

CONTRIBUTION_ORDER = ("contouring", "link_geometric", "motion_geometric",
                      "thermal_drift", "dynamic")
DIRECTIONS = ("x", "y", "z")

# rows below this total norm (mm) say nothing about relative shares
SHARE_DENOMINATOR_FLOOR_MM = 1e-12


def mean_norm_percentages(contouring, link_geometric, motion_geometric,
                          thermal_drift, dynamic):
    """Mean percentage share of each source in the total per-point norm.

    Per point the row norms of all five sources are summed; each share is
    the mean over points of source-norm / total-norm, in percent.  Points
    whose total is below the floor carry no share information and are
    excluded.  Shares of one point sum to 1 exactly, so the five outputs
    sum to 100 up to roundoff.
    """
    parts = [np.asarray(m, dtype=float) for m in (
        contouring, link_geometric, motion_geometric, thermal_drift, dynamic)]
    n = parts[0].shape[0]
    if any(p.shape != (n, 3) for p in parts):
        raise ValueError("all five matrices must share the same (n, 3) shape")
    norms = np.stack([np.linalg.norm(p, axis=1) for p in parts], axis=0)
    total = norms.sum(axis=0)
    keep = total > SHARE_DENOMINATOR_FLOOR_MM
    if not np.any(keep):
        raise ValueError("total error norm is zero everywhere; shares undefined")
    return 100.0 * np.mean(norms[:, keep] / total[keep], axis=1)


def max_errors(dev):
    """Per-column maximum absolute value."""
    dev = np.asarray(dev, dtype=float)
    if dev.size == 0:
        raise ValueError("empty matrix")
    return np.max(np.abs(dev), axis=0)


def rms_errors(dev):
    """Per-column root mean square."""
    dev = np.asarray(dev, dtype=float)
    if dev.size == 0:
        raise ValueError("empty matrix")
    return np.sqrt(np.mean(dev ** 2, axis=0))


@dataclass
class PowerLawFit:
    """rms = kappa * F ** exponent, with the log-log goodness of fit."""

    kappa: float
    exponent: float
    r2: float

    def evaluate(self, feeds):
        return self.kappa * np.asarray(feeds, dtype=float) ** self.exponent

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "exponent": self.exponent, "r2": self.r2}


def fit_power_law(feeds, rms) -> PowerLawFit:
    """Ordinary least squares of log(rms) on log(F)."""
    feeds = np.asarray(feeds, dtype=float)
    rms = np.asarray(rms, dtype=float)
    if feeds.shape != rms.shape or feeds.ndim != 1:
        raise ValueError("feeds and rms must be 1-D and equally long")
    if len(feeds) < 2 or len(np.unique(feeds)) < 2:
        raise ValueError("need at least two distinct feed rates")
    if np.any(feeds <= 0.0):
        raise ValueError("feed rates must be positive")
    if np.any(rms <= 0.0):
        raise ValueError("rms values must be positive for a log-log fit")
    lx, ly = np.log(feeds), np.log(rms)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - np.mean(ly)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return PowerLawFit(kappa=float(np.exp(intercept)), exponent=float(slope),
                       r2=r2)


def axis_accelerations(joints: SignalSet, smooth_window_s: float = 0.005) -> dict:
    """Per-axis acceleration from positions: smooth, then differentiate twice.

    A centered moving average of the given window precedes central second
    differences; the smoothing suppresses quantization and noise at the
    cost of attenuating content near the window's corner frequency.
    Units are position-units per second squared.
    """
    if joints.n < 5:
        raise ValueError("need at least 5 samples to differentiate twice")
    dt = 1.0 / joints.rate_hz
    w = max(1, int(round(smooth_window_s * joints.rate_hz)))
    if w % 2 == 0:
        w += 1
    out = {}
    for name, p in joints.channels.items():
        if w > 1:
            padded = np.pad(p, w // 2, mode="edge")
            p = np.convolve(padded, np.full(w, 1.0 / w), mode="valid")
        acc = np.empty_like(p)
        acc[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / dt ** 2
        acc[0], acc[-1] = acc[1], acc[-2]
        out[name] = acc
    return out


@dataclass
class MetricsReport:
    """Tabular summary of one decomposed session."""

    feed_mm_min: float
    shares_percent: dict
    max_um: dict
    rms_um: dict

    def to_dict(self) -> dict:
        return {
            "feed_mm_min": self.feed_mm_min,
            "shares_percent": {k: round(v, 4)
                               for k, v in self.shares_percent.items()},
            "max_um": {k: [round(x, 6) for x in v]
                       for k, v in self.max_um.items()},
            "rms_um": {k: [round(x, 6) for x in v]
                       for k, v in self.rms_um.items()},
        }


def build_session_report(decomp: Decomposition) -> MetricsReport:
    parts = decomp.contributions()
    shares = mean_norm_percentages(*(parts[k] for k in CONTRIBUTION_ORDER))
    return MetricsReport(
        feed_mm_min=decomp.feed_mm_min,
        shares_percent=dict(zip(CONTRIBUTION_ORDER, shares)),
        max_um={k: (max_errors(v) * 1e3).tolist() for k, v in parts.items()},
        rms_um={k: (rms_errors(v) * 1e3).tolist() for k, v in parts.items()},
    )


def build_campaign_report(decomps) -> dict:
    """Aggregate per-session metrics and fit the dynamic-error feed law.

    Sessions are ordered by feed rate.  Directions whose dynamic rms is not
    positive at every feed cannot enter a log-log fit and are skipped with
    a warning.
    """
    decomps = sorted(decomps, key=lambda d: d.feed_mm_min)
    if not decomps:
        raise ValueError("no sessions to report on")
    sessions = [build_session_report(d) for d in decomps]
    feeds = np.array([s.feed_mm_min for s in sessions])
    dyn_rms = np.array([s.rms_um["dynamic"] for s in sessions])

    fits = {}
    if len(feeds) < 2:
        warnings.warn("power-law fit needs at least two feed rates; "
                      "tables emitted without a fit", stacklevel=2)
    else:
        for j, direction in enumerate(DIRECTIONS):
            if np.all(dyn_rms[:, j] > 0.0):
                fits[direction] = fit_power_law(feeds, dyn_rms[:, j]).to_dict()
            else:
                warnings.warn(
                    f"dynamic rms in {direction} is zero at some feed; "
                    f"power-law fit skipped", stacklevel=2)
    return {
        "feeds_mm_min": feeds.tolist(),
        "sessions": [s.to_dict() for s in sessions],
        "dynamic_rms_power_law": fits,
    }


def write_campaign_report(report: dict, out_dir, make_plot: bool = True):
    """report.json, rms_vs_feed.csv and the log-log SVG plot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")

    feeds = np.asarray(report["feeds_mm_min"], dtype=float)
    rms = np.array([s["rms_um"]["dynamic"] for s in report["sessions"]])
    header = "F_mm_min,rms_x_um,rms_y_um,rms_z_um"
    np.savetxt(out_dir / "rms_vs_feed.csv", np.column_stack([feeds, rms]),
               fmt="%.17g", delimiter=",", header=header, comments="")

    if make_plot:
        from .svgplot import render_loglog_plot
        fits = {k: PowerLawFit(**v)
                for k, v in report["dynamic_rms_power_law"].items()}
        svg = render_loglog_plot(
            feeds, {d: rms[:, j] for j, d in enumerate(DIRECTIONS)}, fits,
            title="Dynamic error rms vs programmed feed rate",
            xlabel="feed rate (mm/min)", ylabel="rms (um)")
        (out_dir / "rms_vs_feed.svg").write_text(svg)
