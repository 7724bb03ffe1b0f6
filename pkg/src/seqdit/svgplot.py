"""Self-contained SVG line charts (no plotting dependency)."""

from __future__ import annotations

import os

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

W, H = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 150, 40, 45


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def line_chart(series: dict[str, tuple[list, list]], title: str,
               x_label: str, y_label: str, path: str) -> None:
    """Write a line chart; series maps name -> (xs, ys)."""
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    if not xs_all:
        raise ValueError("no data to plot")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1
    pw = W - MARGIN_L - MARGIN_R
    ph = H - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return MARGIN_T + ph - (y - y_lo) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
    ]
    for yt in _ticks(y_lo, y_hi):
        y = sy(yt)
        parts.append(f'<line x1="{MARGIN_L}" y1="{y:.1f}" '
                     f'x2="{MARGIN_L + pw}" y2="{y:.1f}" '
                     f'stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{MARGIN_L - 6}" y="{y + 4:.1f}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{yt:.4g}</text>')
    for xt in _ticks(x_lo, x_hi):
        x = sx(xt)
        parts.append(f'<text x="{x:.1f}" y="{MARGIN_T + ph + 16}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{xt:.4g}</text>')
    parts.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" '
                 f'height="{ph}" fill="none" stroke="#333333"/>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        ly = MARGIN_T + 14 + 16 * i
        lx = MARGIN_L + pw + 10
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 22}" y="{ly}" font-family="sans-serif" '
                     f'font-size="11">{name}</text>')
    parts.append(f'<text x="{MARGIN_L + pw / 2}" y="{H - 10}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12">{x_label}</text>')
    parts.append(f'<text x="16" y="{MARGIN_T + ph / 2}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {MARGIN_T + ph / 2})">{y_label}</text>')
    parts.append("</svg>")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(parts) + "\n")
    os.replace(tmp, path)
