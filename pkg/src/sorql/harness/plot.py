"""Minimal deterministic SVG line plots of aggregated metrics."""

from __future__ import annotations

import math
from html import escape
from pathlib import Path
from typing import Sequence

from .records import SummaryRow

WIDTH, HEIGHT = 720, 440
LEFT, RIGHT, TOP, BOTTOM = 80, 170, 40, 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _num(x: float) -> str:
    return format(x, ".2f")


def _series(rows: Sequence[SummaryRow]) -> dict:
    names = rows[0].key_names
    for need in ("algorithm", "index", "metric"):
        if need not in names:
            raise ValueError(f"summaries need an {need!r} key")
    ia, ii, im = names.index("algorithm"), names.index("index"), names.index("metric")
    metrics = {r.key[im] for r in rows}
    if len(metrics) != 1:
        raise ValueError(f"summaries must share one metric, got {sorted(metrics)}")
    series: dict = {}
    for r in rows:
        if math.isfinite(r.mean):
            series.setdefault(r.key[ia], []).append((float(r.key[ii]), r.mean))
    return {k: sorted(v) for k, v in series.items()}, metrics.pop()


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * k / n for k in range(n + 1)]


def render_svg(rows: Sequence[SummaryRow], title: str = "", x_label: str = "episode") -> str:
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to plot")
    series, metric = _series(rows)
    pts = [p for v in series.values() for p in v] or [(0.0, 0.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_num(sx(t))}" y="{TOP + ph + 18}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{LEFT - 6}" y="{_num(sy(t) + 4)}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 15}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(
        f'<text x="18" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {TOP + ph / 2:.2f})">{escape(metric)}</text>'
    )
    if title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for k, (name, points) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        coords = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in points)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = TOP + 16 + 18 * k
        lx = LEFT + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}" class="legend">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(rows: Sequence[SummaryRow], path, title: str = "", x_label: str = "episode") -> None:
    Path(path).write_text(render_svg(rows, title, x_label), encoding="utf-8", newline="\n")
