"""Hand-rolled SVG figures: line charts, scatter, bars, heat strips.

No plotting dependency; output is deterministic text so figures can be
diffed between runs.
"""

from __future__ import annotations

import numpy as np


PALETTE = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]


def _fmt(x: float) -> str:
    return f"{x:.2f}"


class _Canvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts: list[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]

    def text(self, x, y, s, size=12, anchor="start", color="#333"):
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}" fill="{color}">{_escape(s)}</text>'
        )

    def line(self, x1, y1, x2, y2, color="#999", width=1.0):
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{color}" stroke-width="{width}"/>'
        )

    def polyline(self, points, color, width=1.2):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}"/>'
        )

    def rect(self, x, y, w, h, fill, opacity=1.0):
        self.parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" '
            f'fill="{fill}" opacity="{opacity:.3f}"/>'
        )

    def circle(self, x, y, r, fill):
        self.parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" fill="{fill}"/>')

    def save(self, path):
        self.parts.append("</svg>")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.parts) + "\n")


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


class _Axes:
    """Maps data space to a pixel box and draws the frame."""

    def __init__(self, canvas, box, x_range, y_range):
        self.canvas = canvas
        self.x0, self.y0, self.x1, self.y1 = box  # pixel corners (y grows down)
        lo_x, hi_x = x_range
        lo_y, hi_y = y_range
        if hi_x == lo_x:
            hi_x = lo_x + 1.0
        if hi_y == lo_y:
            hi_y = lo_y + 1.0
        self.xr = (lo_x, hi_x)
        self.yr = (lo_y, hi_y)

    def px(self, x):
        return self.x0 + (x - self.xr[0]) / (self.xr[1] - self.xr[0]) * (self.x1 - self.x0)

    def py(self, y):
        return self.y1 - (y - self.yr[0]) / (self.yr[1] - self.yr[0]) * (self.y1 - self.y0)

    def frame(self, n_ticks=5):
        c = self.canvas
        c.line(self.x0, self.y1, self.x1, self.y1)
        c.line(self.x0, self.y0, self.x0, self.y1)
        for i in range(n_ticks + 1):
            fx = self.xr[0] + i * (self.xr[1] - self.xr[0]) / n_ticks
            fy = self.yr[0] + i * (self.yr[1] - self.yr[0]) / n_ticks
            c.text(self.px(fx), self.y1 + 14, f"{fx:g}", size=9, anchor="middle")
            c.text(self.x0 - 4, self.py(fy) + 3, f"{fy:.3g}", size=9, anchor="end")


def _series_ranges(series):
    xs = np.concatenate([np.asarray(s[1], dtype=float) for s in series])
    ys = np.concatenate([np.asarray(s[2], dtype=float) for s in series])
    return (float(xs.min()), float(xs.max())), (float(ys.min()), float(ys.max()))


def line_chart(series, path, title="", width=820, height=320):
    """series: list of (label, xs, ys) tuples drawn in palette order."""
    canvas = _Canvas(width, height)
    x_range, y_range = _series_ranges(series)
    axes = _Axes(canvas, (60, 30, width - 20, height - 30), x_range, y_range)
    axes.frame()
    if title:
        canvas.text(width / 2, 18, title, size=13, anchor="middle")
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = [(axes.px(x), axes.py(y)) for x, y in zip(xs, ys)]
        canvas.polyline(pts, color)
        canvas.text(width - 150, 40 + i * 14, label, size=10, color=color)
    canvas.save(path)


def spectrum_panels(panels, path, title="", width=900, masked_spans=None):
    """Stacked spectrum panels; panels is a list of (label, values).

    ``masked_spans`` optionally maps a panel index to (start, stop) index
    pairs shaded gray (used to show hidden patches).
    """
    panel_h = 140
    height = 30 + panel_h * len(panels)
    canvas = _Canvas(width, height)
    if title:
        canvas.text(width / 2, 18, title, size=13, anchor="middle")
    for i, (label, values) in enumerate(panels):
        values = np.asarray(values, dtype=float)
        top = 30 + i * panel_h
        axes = _Axes(
            canvas,
            (60, top + 10, width - 20, top + panel_h - 20),
            (0, len(values) - 1),
            (float(values.min()), float(values.max())),
        )
        if masked_spans and i in masked_spans:
            for start, stop in masked_spans[i]:
                axes_x0, axes_x1 = axes.px(start), axes.px(stop - 1)
                canvas.rect(axes_x0, top + 10, axes_x1 - axes_x0, panel_h - 30, "#dddddd", 0.8)
        axes.frame(n_ticks=4)
        pts = [(axes.px(j), axes.py(v)) for j, v in enumerate(values)]
        canvas.polyline(pts, PALETTE[i % len(PALETTE)])
        canvas.text(65, top + 20, label, size=11)
    canvas.save(path)


def scatter_2d(points, groups, path, title="", width=520, height=520, group_names=None):
    """2D scatter colored by integer group id."""
    points = np.asarray(points, dtype=float)
    groups = np.asarray(groups, dtype=int)
    canvas = _Canvas(width, height)
    axes = _Axes(
        canvas,
        (50, 30, width - 20, height - 40),
        (float(points[:, 0].min()), float(points[:, 0].max())),
        (float(points[:, 1].min()), float(points[:, 1].max())),
    )
    axes.frame(n_ticks=4)
    if title:
        canvas.text(width / 2, 18, title, size=13, anchor="middle")
    for (x, y), g in zip(points, groups):
        canvas.circle(axes.px(x), axes.py(y), 2.5, PALETTE[g % len(PALETTE)])
    for g in sorted(set(int(g) for g in groups)):
        name = group_names[g] if group_names else f"group {g}"
        canvas.text(width - 110, 40 + g * 14, name, size=10, color=PALETTE[g % len(PALETTE)])
    canvas.save(path)


def bar_chart(labels, values, path, title="", width=620, height=320):
    canvas = _Canvas(width, height)
    values = np.asarray(values, dtype=float)
    top_val = max(float(values.max()), 1e-12)
    axes = _Axes(canvas, (60, 30, width - 20, height - 40), (0, len(values)), (0, top_val))
    if title:
        canvas.text(width / 2, 18, title, size=13, anchor="middle")
    slot = (axes.x1 - axes.x0) / max(len(values), 1)
    for i, (label, v) in enumerate(zip(labels, values)):
        x = axes.x0 + i * slot + 0.15 * slot
        y = axes.py(v)
        canvas.rect(x, y, 0.7 * slot, axes.y1 - y, PALETTE[0])
        canvas.text(x + 0.35 * slot, axes.y1 + 14, str(label), size=10, anchor="middle")
        canvas.text(x + 0.35 * slot, y - 4, f"{v:.4f}", size=9, anchor="middle")
    canvas.line(axes.x0, axes.y1, axes.x1, axes.y1)
    canvas.save(path)


def _heat_color(v: float) -> str:
    """Cool blue (0) to warm red (1)."""
    v = min(max(float(v), 0.0), 1.0)
    r = int(round(255 * v))
    b = int(round(255 * (1.0 - v)))
    g = int(round(80 * (1.0 - abs(2 * v - 1.0))))
    return f"#{r:02x}{g:02x}{b:02x}"


def heat_strip(spectrum, relevance, path, title="", width=900, height=260):
    """Spectrum polyline with a relevance color band underneath."""
    spectrum = np.asarray(spectrum, dtype=float)
    relevance = np.asarray(relevance, dtype=float)
    canvas = _Canvas(width, height)
    axes = _Axes(
        canvas,
        (60, 30, width - 20, height - 70),
        (0, len(spectrum) - 1),
        (float(spectrum.min()), float(spectrum.max())),
    )
    axes.frame(n_ticks=4)
    if title:
        canvas.text(width / 2, 18, title, size=13, anchor="middle")
    pts = [(axes.px(i), axes.py(v)) for i, v in enumerate(spectrum)]
    canvas.polyline(pts, "#333333")
    strip_y = height - 55
    cell = (axes.x1 - axes.x0) / len(relevance)
    for i, v in enumerate(relevance):
        canvas.rect(axes.x0 + i * cell, strip_y, cell + 0.5, 22, _heat_color(v))
    canvas.text(axes.x0, strip_y + 36, "relevance: cool = 0, warm = 1", size=9)
    canvas.save(path)
