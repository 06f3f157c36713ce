"""Minimal deterministic SVG log-log scatter plot, no plotting dependency.

Produces a fixed-size chart: decade grid, per-series markers, and dashed
power-law lines.  Output is a plain string; byte-identical for identical
inputs, so rendered reports stay reproducible.
"""

from __future__ import annotations

import math

import numpy as np

WIDTH, HEIGHT = 640, 480
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 55

SERIES_COLORS = {"x": "#c0392b", "y": "#27ae60", "z": "#2980b9"}
FALLBACK_COLORS = ("#8e44ad", "#d35400", "#16a085")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _decade_label(exp: int) -> str:
    return f"1e{exp}" if abs(exp) > 3 else f"{10.0 ** exp:g}"


class _LogAxis:
    def __init__(self, lo: float, hi: float, px0: float, px1: float):
        if lo <= 0.0 or hi <= 0.0:
            raise ValueError("log axis needs positive bounds")
        pad = 0.05 * max(math.log10(hi) - math.log10(lo), 1e-9)
        self.l0 = math.log10(lo) - pad
        self.l1 = math.log10(hi) + pad
        self.px0, self.px1 = px0, px1

    def to_px(self, v: float) -> float:
        frac = (math.log10(v) - self.l0) / (self.l1 - self.l0)
        return self.px0 + frac * (self.px1 - self.px0)

    def decades(self):
        return range(math.ceil(self.l0), math.floor(self.l1) + 1)

    def minor_ticks(self):
        for exp in range(math.floor(self.l0), math.floor(self.l1) + 1):
            for m in range(2, 10):
                v = m * 10.0 ** exp
                if self.l0 <= math.log10(v) <= self.l1:
                    yield v


def render_loglog_plot(x, series: dict, fits: dict | None = None,
                       title: str = "", xlabel: str = "",
                       ylabel: str = "") -> str:
    """Render positive data series against positive x on log-log axes.

    series maps name -> y array (same length as x); fits optionally maps
    the same names to objects with an ``evaluate(x)`` method, drawn as
    dashed lines.  Nonpositive points are silently omitted (they have no
    place on a log axis).
    """
    x = np.asarray(x, dtype=float)
    fits = fits or {}
    pos_x = x[x > 0.0]
    ys = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    pos_y = ys[ys > 0.0]
    if len(pos_x) == 0 or len(pos_y) == 0:
        raise ValueError("nothing positive to plot on log axes")

    ax_x = _LogAxis(pos_x.min(), pos_x.max(), MARGIN_L, WIDTH - MARGIN_R)
    ax_y = _LogAxis(pos_y.min(), pos_y.max(), HEIGHT - MARGIN_B, MARGIN_T)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
    ]

    # grid
    for exp in ax_x.decades():
        px = ax_x.to_px(10.0 ** exp)
        parts.append(f'<line x1="{_fmt(px)}" y1="{MARGIN_T}" x2="{_fmt(px)}" '
                     f'y2="{HEIGHT - MARGIN_B}" stroke="#dddddd"/>')
        parts.append(f'<text x="{_fmt(px)}" y="{HEIGHT - MARGIN_B + 18}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{_decade_label(exp)}</text>')
    for exp in ax_y.decades():
        py = ax_y.to_px(10.0 ** exp)
        parts.append(f'<line x1="{MARGIN_L}" y1="{_fmt(py)}" '
                     f'x2="{WIDTH - MARGIN_R}" y2="{_fmt(py)}" stroke="#dddddd"/>')
        parts.append(f'<text x="{MARGIN_L - 8}" y="{_fmt(py + 4)}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{_decade_label(exp)}</text>')
    for v in ax_x.minor_ticks():
        px = ax_x.to_px(v)
        parts.append(f'<line x1="{_fmt(px)}" y1="{HEIGHT - MARGIN_B}" '
                     f'x2="{_fmt(px)}" y2="{HEIGHT - MARGIN_B - 4}" '
                     f'stroke="#aaaaaa"/>')
    for v in ax_y.minor_ticks():
        py = ax_y.to_px(v)
        parts.append(f'<line x1="{MARGIN_L}" y1="{_fmt(py)}" '
                     f'x2="{MARGIN_L + 4}" y2="{_fmt(py)}" stroke="#aaaaaa"/>')

    # frame and axis labels
    parts.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" '
                 f'width="{WIDTH - MARGIN_L - MARGIN_R}" '
                 f'height="{HEIGHT - MARGIN_T - MARGIN_B}" fill="none" '
                 f'stroke="#333333"/>')
    parts.append(f'<text x="{(MARGIN_L + WIDTH - MARGIN_R) / 2:.0f}" '
                 f'y="{HEIGHT - 12}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13">{xlabel}</text>')
    parts.append(f'<text x="16" y="{(MARGIN_T + HEIGHT - MARGIN_B) / 2:.0f}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="13" transform="rotate(-90 16 '
                 f'{(MARGIN_T + HEIGHT - MARGIN_B) / 2:.0f})">{ylabel}</text>')

    # dashed fit lines under the markers
    palette = iter(FALLBACK_COLORS)
    colors = {name: SERIES_COLORS.get(name) or next(palette)
              for name in series}
    for name, fit in fits.items():
        if name not in series:
            continue
        gx = np.exp(np.linspace(math.log(pos_x.min()), math.log(pos_x.max()), 50))
        gy = fit.evaluate(gx)
        pts = " ".join(f"{_fmt(ax_x.to_px(a))},{_fmt(ax_y.to_px(b))}"
                       for a, b in zip(gx, gy) if b > 0.0)
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{colors[name]}" stroke-dasharray="6 4" '
                     f'stroke-width="1.2"/>')

    for name, values in series.items():
        values = np.asarray(values, dtype=float)
        for xv, yv in zip(x, values):
            if xv > 0.0 and yv > 0.0:
                parts.append(f'<circle cx="{_fmt(ax_x.to_px(xv))}" '
                             f'cy="{_fmt(ax_y.to_px(yv))}" r="4" '
                             f'fill="{colors[name]}"/>')

    # legend
    ly = MARGIN_T + 14
    for name in series:
        label = name
        if name in fits:
            label += f" (N={fits[name].exponent:.2f})"
        parts.append(f'<circle cx="{WIDTH - MARGIN_R - 130}" cy="{ly}" r="4" '
                     f'fill="{colors[name]}"/>')
        parts.append(f'<text x="{WIDTH - MARGIN_R - 120}" y="{ly + 4}" '
                     f'font-family="sans-serif" font-size="12">{label}</text>')
        ly += 18

    parts.append("</svg>")
    return "\n".join(parts) + "\n"
