"""Minimal SVG line plots of planar trajectories (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")
GT_COLOR = "#2ca02c"


def trajectories_svg(
    series: Sequence[tuple[str, np.ndarray, str]],
    title: str = "",
    size: int = 480,
    pad: float = 2.0,
) -> str:
    """Render (label, points (N, 2), colour) polylines, x forward drawn upward."""
    pts = [np.asarray(p, dtype=float)[:, :2] for _, p, _ in series if len(p)]
    allp = np.vstack(pts + [np.zeros((1, 2))])
    lo, hi = allp.min(0) - pad, allp.max(0) + pad
    span = float(max(hi - lo))
    scale = (size - 40) / span

    def xy(p):
        # ego x points up the page, ego y (left) points left
        return 20 + (hi[1] - p[1]) * scale, 20 + (hi[0] - p[0]) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="8" y="14" font-family="sans-serif" font-size="12">{escape(title)}</text>')
    for k, (label, p, colour) in enumerate(series):
        p = np.asarray(p, dtype=float)
        if not len(p):
            continue
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in (xy(q) for q in p))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
        out.append(
            f'<text x="{size - 120}" y="{16 + 14 * k}" font-family="sans-serif" font-size="11" '
            f'fill="{colour}">{escape(label)}</text>'
        )
    ox, oy = xy(np.zeros(2))
    out.append(f'<circle cx="{ox:.2f}" cy="{oy:.2f}" r="3" fill="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str | Path, series, title: str = "") -> Path:
    path = Path(path)
    path.write_text(trajectories_svg(series, title))
    return path
