"""Tiny dependency-free SVG bar and line charts."""
from __future__ import annotations

import math
from html import escape
from pathlib import Path

PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1")
WIDTH, HEIGHT = 640, 360
MARGIN = {"left": 60, "right": 20, "top": 40, "bottom": 90}


def _svg(body: list, title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">')
    title_el = f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>'
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', title_el, *body, "</svg>"]) + "\n"


def _nice_max(v: float) -> float:
    if not math.isfinite(v) or v <= 0:
        return 1.0
    mag = 10 ** math.floor(math.log10(v))
    for step in (1, 2, 5, 10):
        if v <= step * mag:
            return step * mag
    return 10 * mag


def _axes(ymin: float, ymax: float, ylabel: str) -> list:
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    out = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']
    for k in range(6):
        val = ymin + (ymax - ymin) * k / 5
        y = y0 - (y0 - y1) * k / 5
        out.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end">{val:.3g}</text>')
    out.append(f'<text x="14" y="{(y0 + y1) / 2:.1f}" transform="rotate(-90 14 {(y0 + y1) / 2:.1f})" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    return out


def bar_chart(labels: list, values: list, title: str = "", ylabel: str = "") -> str:
    finite = [v for v in values if v is not None and math.isfinite(v)]
    ymax = _nice_max(max(finite, default=1.0))
    body = _axes(0.0, ymax, ylabel)
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    n = max(len(labels), 1)
    slot = (x1 - x0) / n
    for i, (lab, v) in enumerate(zip(labels, values)):
        cx = x0 + slot * (i + 0.5)
        if v is not None and math.isfinite(v):
            h = (y0 - y1) * max(v, 0.0) / ymax
            body.append(f'<rect x="{cx - slot * 0.35:.1f}" y="{y0 - h:.1f}" width="{slot * 0.7:.1f}" '
                        f'height="{h:.1f}" fill="{PALETTE[i % len(PALETTE)]}"/>')
            body.append(f'<text x="{cx:.1f}" y="{y0 - h - 4:.1f}" text-anchor="middle">{v:.2f}</text>')
        body.append(f'<text x="{cx:.1f}" y="{y0 + 14}" text-anchor="end" '
                    f'transform="rotate(-30 {cx:.1f} {y0 + 14})">{escape(str(lab))}</text>')
    return _svg(body, title)


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """``series`` maps a name to a list of ``(x, y)`` points."""
    pts = [p for s in series.values() for p in s if math.isfinite(p[1])]
    if not pts:
        return _svg(_axes(0.0, 1.0, ylabel), title)
    xmin, xmax = min(p[0] for p in pts), max(p[0] for p in pts)
    ymin, ymax = min(0.0, min(p[1] for p in pts)), _nice_max(max(p[1] for p in pts))
    xmax = xmax if xmax > xmin else xmin + 1
    body = _axes(ymin, ymax, ylabel)
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def sx(x):
        return x0 + (x1 - x0) * (x - xmin) / (xmax - xmin)

    def sy(y):
        return y0 - (y0 - y1) * (y - ymin) / (ymax - ymin)

    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s if math.isfinite(y))
        body.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = HEIGHT - MARGIN["bottom"] + 40 + 14 * (i // 3)
        lx = x0 + 190 * (i % 3)
        body.append(f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        body.append(f'<text x="{lx + 14}" y="{ly}">{escape(str(name))}</text>')
    body.append(f'<text x="{(x0 + x1) / 2}" y="{y0 + 30}" text-anchor="middle">{escape(xlabel)}</text>')
    return _svg(body, title)


def write_svg(path, svg: str) -> None:
    Path(path).write_text(svg, encoding="utf-8")
