"""Self-contained SVG line plots, no plotting dependency.

Covers what the reports need: an axes box with tick labels, one polyline per
series, optional log scales, and a legend. Output is a plain ``<svg>``
document string; everything is deterministic in the input.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .errors import AnalysisError

PALETTE = ("#1b6ca8", "#c0392b", "#2d8a4e", "#8e44ad", "#d68910", "#16606e")
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62, 16, 30, 46


def _nice_step(span: float) -> float:
    raw = span / 4.0
    mag = 10.0 ** np.floor(np.log10(raw))
    frac = raw / mag
    for nice in (1.0, 2.0, 5.0):
        if frac <= nice:
            return nice * mag
    return 10.0 * mag


def _linear_ticks(lo: float, hi: float) -> list[float]:
    step = _nice_step(hi - lo)
    first = np.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else float(t))
        t += step
    return ticks


def _prepare(values, log: bool, axis: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise AnalysisError(f"non-finite {axis} values in plot data")
    if log:
        if np.any(arr <= 0):
            raise AnalysisError(f"log {axis} axis needs positive values")
        arr = np.log10(arr)
    return arr


def _fmt(v: float) -> str:
    return f"{v:g}"


def line_plot(series, *, title: str = "", xlabel: str = "", ylabel: str = "",
              width: int = 640, height: int = 420, log_x: bool = False,
              log_y: bool = False) -> str:
    """Render series = [(label, xs, ys), ...] to an SVG document string."""
    series = list(series)
    if not series:
        raise AnalysisError("line_plot needs at least one series")
    prepared = []
    for label, xs, ys in series:
        px = _prepare(xs, log_x, "x")
        py = _prepare(ys, log_y, "y")
        if px.shape != py.shape or px.size == 0:
            raise AnalysisError(
                f"series {label!r}: x and y must be nonempty and equal "
                f"length, got {px.size} and {py.size}")
        prepared.append((str(label), px, py))

    def limits(idx):
        lo = min(float(p[idx].min()) for p in prepared)
        hi = max(float(p[idx].max()) for p in prepared)
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.04 * (hi - lo)
        return lo - pad, hi + pad

    x_lo, x_hi = limits(1)
    y_lo, y_hi = limits(2)
    plot_w = width - MARGIN_L - MARGIN_R
    plot_h = height - MARGIN_T - MARGIN_B

    def to_px(v):
        return MARGIN_L + (v - x_lo) / (x_hi - x_lo) * plot_w

    def to_py(v):
        return MARGIN_T + (y_hi - v) / (y_hi - y_lo) * plot_h

    def tick_label(t, log):
        return _fmt(10.0 ** t) if log else _fmt(t)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" '
           f'height="{plot_h}" fill="none" stroke="#444"/>']

    for t in _linear_ticks(x_lo, x_hi):
        px = to_px(t)
        out.append(f'<line x1="{px:.2f}" y1="{MARGIN_T + plot_h}" '
                   f'x2="{px:.2f}" y2="{MARGIN_T + plot_h + 5}" '
                   f'stroke="#444"/>')
        out.append(f'<text x="{px:.2f}" y="{MARGIN_T + plot_h + 18}" '
                   f'text-anchor="middle">{tick_label(t, log_x)}</text>')
    for t in _linear_ticks(y_lo, y_hi):
        py = to_py(t)
        out.append(f'<line x1="{MARGIN_L - 5}" y1="{py:.2f}" '
                   f'x2="{MARGIN_L}" y2="{py:.2f}" stroke="#444"/>')
        out.append(f'<text x="{MARGIN_L - 8}" y="{py + 4:.2f}" '
                   f'text-anchor="end">{tick_label(t, log_y)}</text>')

    for i, (label, px, py) in enumerate(prepared):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{to_px(a):.2f},{to_py(b):.2f}"
                       for a, b in zip(px, py))
        out.append(f'<polyline class="series" points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')

    if title:
        out.append(f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" '
                   f'font-size="14">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{MARGIN_L + plot_w / 2:.0f}" '
                   f'y="{height - 10}" text-anchor="middle">'
                   f'{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{MARGIN_T + plot_h / 2:.0f}" '
                   f'text-anchor="middle" transform="rotate(-90 14 '
                   f'{MARGIN_T + plot_h / 2:.0f})">{escape(ylabel)}</text>')

    labeled = [(i, label) for i, (label, _, _) in enumerate(prepared) if label]
    if labeled:
        lx = MARGIN_L + plot_w - 150
        ly = MARGIN_T + 10
        for row, (i, label) in enumerate(labeled):
            y = ly + 16 * row
            color = PALETTE[i % len(PALETTE)]
            out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 22}" y2="{y}" '
                       f'stroke="{color}" stroke-width="1.5"/>')
            out.append(f'<text x="{lx + 28}" y="{y + 4}">'
                       f'{escape(label)}</text>')

    out.append("</svg>")
    return "\n".join(out)


def write_line_plot(path, series, **kwargs) -> None:
    with open(path, "w") as f:
        f.write(line_plot(series, **kwargs))
        f.write("\n")
