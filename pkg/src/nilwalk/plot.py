"""Bare SVG line charts: axes, ticks at the ends, one polyline per series."""

from __future__ import annotations

import math
from pathlib import Path

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def line_chart(path, series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 480, height: int = 320) -> Path:
    pts = [(x, y) for s in series.values() for x, y in s if math.isfinite(x) and math.isfinite(y)]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    m = 48

    def sx(x):
        return m + (x - x0) / (x1 - x0) * (width - 2 * m)

    def sy(y):
        return height - m - (y - y0) / (y1 - y0) * (height - 2 * m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>',
           f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
           f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" '
           f'text-anchor="middle">{ylabel}</text>',
           f'<text x="{m}" y="{height - m + 16}" font-size="10">{x0:.3g}</text>',
           f'<text x="{width - m}" y="{height - m + 16}" font-size="10" text-anchor="end">{x1:.3g}</text>',
           f'<text x="{m - 4}" y="{height - m}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{m - 4}" y="{m + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (name, s) in enumerate(series.items()):
        c = COLORS[i % len(COLORS)]
        poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s if math.isfinite(x) and math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{c}" points="{poly}"/>')
        out.append(f'<text x="{width - m}" y="{m + 14 * i}" font-size="10" fill="{c}" '
                   f'text-anchor="end">{name}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out))
    return path
