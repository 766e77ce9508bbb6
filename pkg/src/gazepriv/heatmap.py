"""Deterministic SVG heatmap of a feature x rating correlation matrix."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from . import RATING_LABELS

CELL_W, CELL_H = 64, 14
LABEL_W, HEADER_H = 150, 40
LEGEND_H = 40
NEGATIVE = (33, 102, 172)
NEUTRAL = (247, 247, 247)
POSITIVE = (178, 24, 43)
MASKED_FILL = "#dddddd"


def diverging_color(rho: float) -> str:
    """Blue for -1, near-white for 0, red for +1; values outside [-1, 1] are clipped."""
    r = max(-1.0, min(1.0, rho))
    end = POSITIVE if r >= 0 else NEGATIVE
    a = abs(r)
    rgb = (round(n + (e - n) * a) for n, e in zip(NEUTRAL, end))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_svg(m, title: str | None = None, comment: str | None = None) -> str:
    n_rows, n_cols = m.shape
    width = LABEL_W + n_cols * CELL_W + 10
    height = HEADER_H + n_rows * CELL_H + LEGEND_H
    title = title or f"{m.task} / {m.pooling}"
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
    ]
    if comment:
        out.append(f"<!-- {escape(comment).replace('--', '- -')} -->")
    out += [
        "<defs>",
        '<pattern id="mask" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">',
        f'<rect width="6" height="6" fill="{MASKED_FILL}"/>',
        '<line x1="0" y1="0" x2="0" y2="6" stroke="#999999" stroke-width="2"/>',
        "</pattern>",
        "</defs>",
        f'<text x="{LABEL_W}" y="14" font-size="12">{escape(title)}</text>',
    ]
    for j, rating in enumerate(m.ratings):
        x = LABEL_W + j * CELL_W + CELL_W / 2
        out.append(f'<text x="{x:g}" y="{HEADER_H - 6}" text-anchor="middle">{RATING_LABELS[rating]}</text>')
    for i, (name, row) in enumerate(zip(m.features, m.cells)):
        y = HEADER_H + i * CELL_H
        out.append(f'<text x="{LABEL_W - 4}" y="{y + CELL_H - 3}" text-anchor="end">{escape(name)}</text>')
        for j, c in enumerate(row):
            x = LABEL_W + j * CELL_W
            if c.masked or not math.isfinite(c.rho):
                out.append(f'<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="url(#mask)" '
                           'stroke="#ffffff" stroke-width="0.5"/>')
                continue
            out.append(f'<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" '
                       f'fill="{diverging_color(c.rho)}" stroke="#ffffff" stroke-width="0.5"/>')
            if c.significant:
                out.append(f'<rect class="sig" x="{x + 1}" y="{y + 1}" width="{CELL_W - 2}" height="{CELL_H - 2}" '
                           'fill="none" stroke="#000000" stroke-width="1.5"/>')
            out.append(f'<text x="{x + CELL_W / 2:g}" y="{y + CELL_H - 3}" text-anchor="middle" '
                       f'font-size="8">{c.rho:.2f}</text>')
    ly = HEADER_H + n_rows * CELL_H + 12
    for k in range(21):
        rho = -1 + k * 0.1
        out.append(f'<rect x="{LABEL_W + k * 8}" y="{ly}" width="8" height="10" fill="{diverging_color(rho)}"/>')
    out.append(f'<text x="{LABEL_W}" y="{ly + 22}">-1</text>')
    out.append(f'<text x="{LABEL_W + 168}" y="{ly + 22}" text-anchor="end">+1</text>')
    out.append(f'<text x="{LABEL_W + 176}" y="{ly + 9}">outlined: p &lt; 0.05; hatched: masked</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_heatmap(m, path, title: str | None = None, comment: str | None = None) -> None:
    Path(path).write_text(render_svg(m, title, comment))
