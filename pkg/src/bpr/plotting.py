"""Dependency-free SVG line and bar charts with byte-stable output."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT = 640, 400
MARGIN = 56


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    kind: str = "line"          # "line" or "bar"
    err: Sequence[float] | None = None


@dataclass
class Panel:
    title: str
    series: list[Series] = field(default_factory=list)
    xlabel: str = ""
    ylabel: str = ""


def _fmt(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".") if v == v else "nan"


def _range(vals):
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _panel_svg(panel: Panel, ox: float, oy: float, w: float, h: float) -> list[str]:
    if not panel.series or any(len(s.x) == 0 or len(s.x) != len(s.y) for s in panel.series):
        raise ValueError(f"panel {panel.title!r} needs nonempty series with matching x/y")
    xs = [float(v) for s in panel.series for v in s.x]
    ys = [float(v) for s in panel.series for v in s.y]
    for s in panel.series:
        if s.err is not None:
            ys += [float(a) + float(e) for a, e in zip(s.y, s.err)]
            ys += [float(a) - float(e) for a, e in zip(s.y, s.err)]
    if any(s.kind == "bar" for s in panel.series):
        ys.append(0.0)
    x0, x1 = _range(xs)
    y0, y1 = _range(ys)
    pw, ph = w - 2 * MARGIN, h - 2 * MARGIN
    px = lambda v: ox + MARGIN + (float(v) - x0) / (x1 - x0) * pw
    py = lambda v: oy + MARGIN + (1.0 - (float(v) - y0) / (y1 - y0)) * ph

    out = [f'<rect x="{_fmt(ox + MARGIN)}" y="{_fmt(oy + MARGIN)}" width="{_fmt(pw)}" height="{_fmt(ph)}" '
           f'fill="none" stroke="#444"/>',
           f'<text x="{_fmt(ox + w / 2)}" y="{_fmt(oy + MARGIN / 2)}" text-anchor="middle" '
           f'font-size="14">{escape(panel.title)}</text>',
           f'<text x="{_fmt(ox + w / 2)}" y="{_fmt(oy + h - 12)}" text-anchor="middle" '
           f'font-size="12">{escape(panel.xlabel)}</text>',
           f'<text x="{_fmt(ox + 14)}" y="{_fmt(oy + h / 2)}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 {_fmt(ox + 14)} {_fmt(oy + h / 2)})">{escape(panel.ylabel)}</text>']
    for t in range(5):
        xv = x0 + (x1 - x0) * t / 4
        yv = y0 + (y1 - y0) * t / 4
        out.append(f'<text x="{_fmt(px(xv))}" y="{_fmt(oy + h - MARGIN + 16)}" text-anchor="middle" '
                   f'font-size="10">{_fmt(xv)}</text>')
        out.append(f'<text x="{_fmt(ox + MARGIN - 4)}" y="{_fmt(py(yv) + 3)}" text-anchor="end" '
                   f'font-size="10">{_fmt(yv)}</text>')

    bars = [s for s in panel.series if s.kind == "bar"]
    for k, s in enumerate(panel.series):
        color = PALETTE[k % len(PALETTE)]
        out.append(f'<g class="series" data-label="{escape(s.label)}">')
        if s.kind == "bar":
            j = bars.index(s)
            n = len(s.x)
            slot = pw / max(n, 1) * 0.8
            bw = slot / len(bars)
            for i, (xv, yv) in enumerate(zip(s.x, s.y)):
                cx = ox + MARGIN + pw * (i + 0.5) / n - slot / 2 + j * bw
                top, base = py(max(float(yv), 0.0)), py(min(float(yv), 0.0))
                out.append(f'<rect class="bar" x="{_fmt(cx)}" y="{_fmt(top)}" width="{_fmt(bw)}" '
                           f'height="{_fmt(base - top)}" fill="{color}"/>')
                out.append(f'<text x="{_fmt(cx + bw / 2)}" y="{_fmt(oy + h - MARGIN + 28)}" '
                           f'text-anchor="middle" font-size="10">{_fmt(float(xv))}</text>')
                if s.err is not None:
                    e = float(s.err[i])
                    out.append(f'<line x1="{_fmt(cx + bw / 2)}" x2="{_fmt(cx + bw / 2)}" '
                               f'y1="{_fmt(py(float(yv) - e))}" y2="{_fmt(py(float(yv) + e))}" stroke="#000"/>')
        else:
            pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(s.x, s.y))
            if len(s.x) > 1:
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            else:
                out.append(f'<circle class="marker" cx="{_fmt(px(s.x[0]))}" cy="{_fmt(py(s.y[0]))}" '
                           f'r="3" fill="{color}"/>')
        out.append("</g>")
        ly = oy + MARGIN + 14 + 16 * k
        lx = ox + w - MARGIN - 150
        out.append(f'<rect x="{_fmt(lx)}" y="{_fmt(ly - 9)}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text class="legend" x="{_fmt(lx + 14)}" y="{_fmt(ly)}" font-size="11">'
                   f'{escape(s.label)}</text>')
    return out


def render_svg(panels: Sequence[Panel]) -> str:
    if not panels:
        raise ValueError("nothing to plot")
    total_w = WIDTH * len(panels)
    body = []
    for i, p in enumerate(panels):
        body += _panel_svg(p, i * WIDTH, 0, WIDTH, HEIGHT)
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{HEIGHT}" '
            f'viewBox="0 0 {total_w} {HEIGHT}">')
    return "\n".join([head, f'<rect width="{total_w}" height="{HEIGHT}" fill="#fff"/>', *body, "</svg>"]) + "\n"


def emit_plot(series, path, title: str = "", xlabel: str = "", ylabel: str = "") -> Path:
    """Write ``series`` (a Series, a list of them, or a list of Panels) as one SVG file."""
    if isinstance(series, Series):
        series = [series]
    series = list(series)
    if not series:
        raise ValueError("empty series")
    panels = series if isinstance(series[0], Panel) else [Panel(title, series, xlabel, ylabel)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(panels))
    return path
