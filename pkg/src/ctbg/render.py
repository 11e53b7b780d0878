"""SVG rendering of scenes and predicted block graphs.

Units draw as black outline boxes, successor edges as brown arrows
between box centers, and each block's hull as a green outline.  Output
is a standalone SVG 1.1 document string.
"""

from __future__ import annotations

from functools import reduce
from xml.sax.saxutils import escape

from .graph import Block, Box, Edge, union_box

UNIT_STROKE = "#000000"
EDGE_STROKE = "#8b4513"
BLOCK_STROKE = "#1a9641"


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def render_scene(
    units: list[Box],
    edges: list[Edge] | None = None,
    blocks: list[Block] | None = None,
    size: int = 640,
    title: str | None = None,
) -> str:
    """Render unit boxes with optional edge arrows and block hulls."""
    s = float(size)
    pad = 0.012 * s
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        '<defs><marker id="head" viewBox="0 0 8 8" refX="7" refY="4" '
        'markerWidth="6" markerHeight="6" orient="auto-start-reverse">'
        f'<path d="M0,0 L8,4 L0,8 z" fill="{EDGE_STROKE}"/></marker></defs>',
        f'<rect width="{size}" height="{size}" fill="#ffffff"/>',
    ]
    if title:
        out.append(
            f'<title>{escape(title)}</title>'
        )

    if blocks:
        for blk in blocks:
            hull = reduce(union_box, (units[u] for u in blk.units))
            out.append(
                f'<rect x="{_fmt(hull.x0 * s - pad)}" y="{_fmt(hull.y0 * s - pad)}" '
                f'width="{_fmt(hull.width * s + 2 * pad)}" '
                f'height="{_fmt(hull.height * s + 2 * pad)}" '
                f'fill="none" stroke="{BLOCK_STROKE}" stroke-width="2.5"/>'
            )

    for b in units:
        out.append(
            f'<rect x="{_fmt(b.x0 * s)}" y="{_fmt(b.y0 * s)}" '
            f'width="{_fmt(b.width * s)}" height="{_fmt(b.height * s)}" '
            f'fill="none" stroke="{UNIT_STROKE}" stroke-width="1.2"/>'
        )

    if edges:
        for e in edges:
            x1, y1 = units[e.src].center
            x2, y2 = units[e.dst].center
            out.append(
                f'<line x1="{_fmt(x1 * s)}" y1="{_fmt(y1 * s)}" '
                f'x2="{_fmt(x2 * s)}" y2="{_fmt(y2 * s)}" '
                f'stroke="{EDGE_STROKE}" stroke-width="1.6" marker-end="url(#head)"/>'
            )

    out.append("</svg>")
    return "\n".join(out)


def save_svg(path, svg: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
        if not svg.endswith("\n"):
            fh.write("\n")
