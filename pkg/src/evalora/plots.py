"""Minimal self-rendered SVG charts.  CSV files next to them hold the data."""
from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n')
    return head + "\n".join(body) + "\n</svg>\n"


def line_chart(series: Mapping[str, Sequence[float]], title: str, ylabel: str,
               xlabel: str = "step", log_y: bool = False, width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 70, 140, 30, 45
    pw, ph = width - left - right, height - top - bottom
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items() if len(v)}
    if log_y:
        ys = {k: np.log10(np.maximum(v, 1e-300)) for k, v in ys.items()}
    allv = np.concatenate(list(ys.values())) if ys else np.zeros(1)
    lo, hi = float(allv.min()), float(allv.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    n = max((v.size for v in ys.values()), default=1)

    def sx(i):
        return left + pw * (i / max(n - 1, 1))

    def sy(v):
        return top + ph * (1 - (v - lo) / (hi - lo))

    body = [f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
    for t in np.linspace(lo, hi, 5):
        label = f"1e{t:.1f}" if log_y else f"{t:.3g}"
        body.append(f'<line x1="{left - 4}" y1="{_f(sy(t))}" x2="{left}" y2="{_f(sy(t))}" stroke="#333"/>')
        body.append(f'<text x="{left - 6}" y="{_f(sy(t) + 4)}" text-anchor="end">{label}</text>')
    for t in np.linspace(0, n - 1, 5):
        body.append(f'<text x="{_f(sx(t))}" y="{top + ph + 16}" text-anchor="middle">{int(round(t)) + 1}</text>')
    body.append(f'<text x="{left + pw / 2:.0f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    body.append(f'<text x="14" y="{top + ph / 2:.0f}" text-anchor="middle" '
                f'transform="rotate(-90 14 {top + ph / 2:.0f})">{escape(ylabel)}</text>')
    for i, (name, v) in enumerate(ys.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_f(sx(j))},{_f(sy(y))}" for j, y in enumerate(v))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 16 * i
        body.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{escape(name)}</text>')
    return _svg(width, height, body)


def heatmap(values, row_labels: Sequence[str], col_labels: Sequence[str], title: str,
            cell: int = 28, diverging: bool = False) -> str:
    """Annotated heatmap; ``diverging`` centres the colour scale on zero."""
    m = np.asarray(values, dtype=float)
    left, top = 90, 50
    width = left + cell * m.shape[1] + 20
    height = top + cell * m.shape[0] + 20
    vmax = float(np.abs(m).max()) if m.size else 1.0
    vmin = float(m.min()) if m.size else 0.0
    vmax = vmax or 1.0

    def color(v):
        if diverging:
            t = v / vmax
            r, g, b = (255, int(255 * (1 - t)), int(255 * (1 - t))) if t >= 0 else (int(255 * (1 + t)), int(255 * (1 + t)), 255)
        else:
            hi = float(m.max())
            t = 0.0 if hi == vmin else (v - vmin) / (hi - vmin)
            r, g, b = int(255 - 200 * t), int(255 - 120 * t), int(255 - 40 * t)
        return f"rgb({r},{g},{b})"

    body = [f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for j, c in enumerate(col_labels):
        body.append(f'<text x="{left + cell * j + cell / 2:.1f}" y="{top - 6}" text-anchor="middle">{escape(str(c))}</text>')
    for i, rlab in enumerate(row_labels):
        y = top + cell * i
        body.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4:.1f}" text-anchor="end">{escape(str(rlab))}</text>')
        for j in range(m.shape[1]):
            x = left + cell * j
            v = m[i, j]
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{color(v)}" stroke="#fff"/>')
            txt = f"{v:+.0f}" if diverging else f"{v:.0f}"
            body.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" text-anchor="middle">{txt}</text>')
    return _svg(width, height, body)
