"""Native SVG emission for study artifacts.

Hand-rolled on purpose: plots are byte-deterministic functions of the data,
with no rendering toolkit in the dependency tree.  Only what the studies
need is implemented: log-log scatter with fitted and reference lines, and
linear multi-curve time series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WIDTH = 640
HEIGHT = 440
MARGIN_LEFT = 70
MARGIN_RIGHT = 20
MARGIN_TOP = 36
MARGIN_BOTTOM = 52

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


@dataclass
class Series:
    """One plotted series; style is 'line', 'dashed', 'points' or 'open-points'."""

    x: np.ndarray
    y: np.ndarray
    label: str
    style: str = "line"
    color: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("series x and y must be matching vectors")
        if self.style not in ("line", "dashed", "points", "open-points"):
            raise ValueError(f"unknown style {self.style!r}")


def _nice_linear_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


def _log_ticks(lo: float, hi: float) -> list[float]:
    lo_e = math.floor(math.log10(lo))
    hi_e = math.ceil(math.log10(hi))
    decades = [10.0**e for e in range(lo_e, hi_e + 1)]
    if len(decades) >= 3:
        return [t for t in decades if lo / 1.001 <= t <= hi * 1.001] or decades
    ticks = []
    for e in range(lo_e - 1, hi_e + 1):
        for m in (1, 2, 5):
            t = m * 10.0**e
            if lo / 1.001 <= t <= hi * 1.001:
                ticks.append(t)
    return ticks or decades


def _fmt(v: float) -> str:
    return f"{v:.6g}"


@dataclass
class _Frame:
    """Maps data coordinates to pixel coordinates."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    x_log: bool
    y_log: bool

    def _tx(self, v, lo, hi, log):
        if log:
            v, lo, hi = math.log10(v), math.log10(lo), math.log10(hi)
        if hi == lo:
            return 0.5
        return (v - lo) / (hi - lo)

    def px(self, x: float) -> float:
        frac = self._tx(x, self.x_lo, self.x_hi, self.x_log)
        return MARGIN_LEFT + frac * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)

    def py(self, y: float) -> float:
        frac = self._tx(y, self.y_lo, self.y_hi, self.y_log)
        return HEIGHT - MARGIN_BOTTOM - frac * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)


def _data_range(values: np.ndarray, log: bool) -> tuple[float, float]:
    vals = values[np.isfinite(values)]
    if log:
        vals = vals[vals > 0]
    if vals.size == 0:
        return (0.1, 1.0) if log else (0.0, 1.0)
    lo, hi = float(vals.min()), float(vals.max())
    if log:
        pad = (hi / lo) ** 0.08 if hi > lo else 2.0
        return lo / pad, hi * pad
    pad = 0.06 * (hi - lo) if hi > lo else max(abs(hi), 1.0) * 0.1
    return lo - pad, hi + pad


def render_plot(
    series: list[Series],
    *,
    title: str,
    xlabel: str,
    ylabel: str,
    x_log: bool = False,
    y_log: bool = False,
) -> str:
    """Compose the SVG document for a list of series."""
    if not series:
        raise ValueError("nothing to plot")
    for i, s in enumerate(series):
        if not s.color:
            s.color = PALETTE[i % len(PALETTE)]
    all_x = np.concatenate([s.x for s in series])
    all_y = np.concatenate([s.y for s in series])
    x_lo, x_hi = _data_range(all_x, x_log)
    y_lo, y_hi = _data_range(all_y, y_log)
    frame = _Frame(x_lo, x_hi, y_lo, y_hi, x_log, y_log)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    plot_left, plot_right = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    plot_top, plot_bottom = MARGIN_TOP, HEIGHT - MARGIN_BOTTOM

    x_ticks = _log_ticks(x_lo, x_hi) if x_log else _nice_linear_ticks(x_lo, x_hi)
    y_ticks = _log_ticks(y_lo, y_hi) if y_log else _nice_linear_ticks(y_lo, y_hi)
    for t in x_ticks:
        x = frame.px(t)
        parts.append(
            f'<line x1="{x:.2f}" y1="{plot_top}" x2="{x:.2f}" y2="{plot_bottom}" '
            'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{plot_bottom + 16}" text-anchor="middle">{_fmt(t)}</text>'
        )
    for t in y_ticks:
        y = frame.py(t)
        parts.append(
            f'<line x1="{plot_left}" y1="{y:.2f}" x2="{plot_right}" y2="{y:.2f}" '
            'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{plot_left - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>'
        )
    parts.append(
        f'<rect x="{plot_left}" y="{plot_top}" width="{plot_right - plot_left}" '
        f'height="{plot_bottom - plot_top}" fill="none" stroke="#333333"/>'
    )
    parts.append(
        f'<text x="{(plot_left + plot_right) / 2:.1f}" y="{HEIGHT - 12}" '
        f'text-anchor="middle">{xlabel}</text>'
    )
    parts.append(
        f'<text x="18" y="{(plot_top + plot_bottom) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(plot_top + plot_bottom) / 2:.1f})">{ylabel}</text>'
    )

    for s in series:
        pts = [(frame.px(x), frame.py(y)) for x, y in zip(s.x, s.y) if _plottable(x, y, x_log, y_log)]
        if not pts:
            continue
        if s.style in ("line", "dashed"):
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            dash = ' stroke-dasharray="6 4"' if s.style == "dashed" else ""
            parts.append(
                f'<polyline points="{path}" fill="none" stroke="{s.color}" '
                f'stroke-width="1.6"{dash}/>'
            )
        else:
            fill = s.color if s.style == "points" else "white"
            for x, y in pts:
                parts.append(
                    f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{fill}" '
                    f'stroke="{s.color}" stroke-width="1.5"/>'
                )

    legend_y = plot_top + 14
    for s in series:
        parts.append(
            f'<line x1="{plot_right - 150}" y1="{legend_y - 4}" x2="{plot_right - 126}" '
            f'y2="{legend_y - 4}" stroke="{s.color}" stroke-width="2"'
            + (' stroke-dasharray="6 4"' if s.style == "dashed" else "")
            + "/>"
        )
        parts.append(f'<text x="{plot_right - 120}" y="{legend_y}">{s.label}</text>')
        legend_y += 16
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _plottable(x: float, y: float, x_log: bool, y_log: bool) -> bool:
    if not (math.isfinite(x) and math.isfinite(y)):
        return False
    if x_log and x <= 0:
        return False
    if y_log and y <= 0:
        return False
    return True


def scaling_plot(rows, slope, intercept, path: str) -> None:
    """Log-log particle-count scaling with fitted and N^{-1/2} reference lines.

    rows are StudyRow-like objects (n_particles, l1_error, included); the
    reference line is anchored at the first included row, or the first row
    if the filter excluded everything.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to plot")
    sizes = np.array([r.n_particles for r in rows], dtype=float)
    errors = np.array([r.l1_error for r in rows], dtype=float)
    included = np.array([r.included for r in rows], dtype=bool)
    series = []
    if included.any():
        series.append(
            Series(sizes[included], errors[included], "measured (included)", "points")
        )
    if (~included).any():
        series.append(
            Series(sizes[~included], errors[~included], "measured (excluded)", "open-points")
        )
    span = np.array([sizes.min(), sizes.max()])
    anchor_idx = int(np.argmax(included)) if included.any() else 0
    anchor = errors[anchor_idx] if errors[anchor_idx] > 0 else 1.0
    reference = anchor * (span / sizes[anchor_idx]) ** -0.5
    series.append(Series(span, reference, "slope -1/2 reference", "dashed", "#999999"))
    if slope is not None and intercept is not None:
        fitted = np.exp(intercept) * span**slope
        series.append(Series(span, fitted, f"fit slope {slope:.3f}", "line", "#d62728"))
    doc = render_plot(
        series,
        title="Pooled marginal error vs particle count",
        xlabel="particles N",
        ylabel="L1 error",
        x_log=True,
        y_log=True,
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(doc)


def series_plot(times, curves: dict, path: str, *, title: str, ylabel: str) -> None:
    """Linear multi-curve time series, one Series per named curve."""
    times = np.asarray(times, dtype=float)
    series = [Series(times, np.asarray(v, dtype=float), name) for name, v in curves.items()]
    doc = render_plot(series, title=title, xlabel="time", ylabel=ylabel)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(doc)
