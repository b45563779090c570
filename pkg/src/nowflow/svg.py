"""Minimal SVG line charts for ablation sweeps (no plotting dependency)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return list(np.linspace(lo, hi, n))


def line_panel(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
               x0: float, y0: float, width: float = 360, height: float = 240, log_x: bool = False) -> list[str]:
    """SVG elements for one panel; ``series`` maps label -> [(x, y), ...]."""
    pts = [(x, y) for s in series.values() for x, y in s if np.isfinite(y)]
    xs = [np.log10(x) if log_x else x for x, _ in pts] or [0.0, 1.0]
    ys = [y for _, y in pts] or [0.0, 1.0]
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    if xhi == xlo:
        xhi = xlo + 1.0
    if yhi == ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad
    left, top, pw, ph = x0 + 55, y0 + 30, width - 75, height - 70

    def px(x):
        x = np.log10(x) if log_x else x
        return left + (x - xlo) / (xhi - xlo) * pw

    def py(y):
        return top + ph - (y - ylo) / (yhi - ylo) * ph

    out = [f'<text x="{x0 + width / 2:.1f}" y="{y0 + 18:.1f}" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{left:.1f}" y="{top:.1f}" width="{pw:.1f}" height="{ph:.1f}" fill="none" stroke="#444"/>']
    for v in _ticks(ylo, yhi):
        out.append(f'<text x="{left - 5:.1f}" y="{py(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    xvals = sorted({x for s in series.values() for x, _ in s})
    for v in xvals:
        out.append(f'<text x="{px(v):.1f}" y="{top + ph + 14:.1f}" text-anchor="middle" font-size="10">{v:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{top + ph + 32:.1f}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>')
    out.append(f'<text x="{x0 + 12:.1f}" y="{top + ph / 2:.1f}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 {x0 + 12:.1f} {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (label, s) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        good = [(x, y) for x, y in s if np.isfinite(y)]
        if good:
            path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in good)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            out += [f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>' for x, y in good]
        out.append(f'<text x="{left + 8:.1f}" y="{top + 14 + 13 * k:.1f}" font-size="10" fill="{color}">{escape(label)}</text>')
    return out


def ablation_chart(rows: list[dict], title: str = "", x_key: str = "nfe",
                   metrics_: tuple[str, ...] = ("CRPS", "CSI-M")) -> str:
    """Side-by-side panels of each metric against ``x_key``, one line per method."""
    width, height = 360, 240
    body = []
    for j, m in enumerate(metrics_):
        series: dict[str, list[tuple[float, float]]] = {}
        for r in rows:
            series.setdefault(r["method"], []).append((float(r[x_key]), float(r[m])))
        for s in series.values():
            s.sort()
        positive = all(x > 0 for s in series.values() for x, _ in s)
        body += line_panel(series, f"{title} {m}".strip(), x_key.upper(), m, j * width, 0, width, height,
                           log_x=positive and len({x for s in series.values() for x, _ in s}) > 2)
    total_w = width * len(metrics_)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{height}" '
            f'viewBox="0 0 {total_w} {height}" font-family="sans-serif">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")
