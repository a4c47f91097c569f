"""Minimal static SVG line charts (one series per file, optional log axis)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=80, right=20, top=36, bottom=50)


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * k / (count - 1) for k in range(count)]


def line_chart(x, y, title: str, xlabel: str = "t", ylabel: str = "", log_y: bool | None = None) -> str:
    """Return an SVG document drawing ``y`` against ``x``.

    ``log_y=None`` picks a log axis when all values are positive and span
    more than two decades.  Non-finite points are dropped.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y)
    if log_y is None:
        pos = y[keep]
        log_y = bool(pos.size) and bool(np.all(pos > 0)) and pos.max() / pos.min() > 100.0
    if log_y:
        keep &= y > 0
    x, y = x[keep], y[keep]
    ty = np.log10(y) if log_y else y
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{_escape(title)}</text>',
    ]
    if x.size:
        x0, x1 = float(x.min()), float(x.max())
        y0, y1 = float(ty.min()), float(ty.max())
        if x1 == x0:
            x1 = x0 + 1.0
        if y1 == y0:
            y0, y1 = y0 - 0.5, y0 + 0.5

        def sx(v):
            return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

        def sy(v):
            return MARGIN["top"] + (1.0 - (v - y0) / (y1 - y0)) * ph

        for tx in _ticks(x0, x1):
            parts.append(f'<line x1="{sx(tx):.2f}" y1="{MARGIN["top"] + ph}" x2="{sx(tx):.2f}" y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
            parts.append(f'<text x="{sx(tx):.2f}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{_fmt(tx)}</text>')
        for tv in _ticks(y0, y1):
            label = _fmt(10.0**tv) if log_y else _fmt(tv)
            parts.append(f'<line x1="{MARGIN["left"] - 5}" y1="{sy(tv):.2f}" x2="{MARGIN["left"]}" y2="{sy(tv):.2f}" stroke="black"/>')
            parts.append(f'<text x="{MARGIN["left"] - 8}" y="{sy(tv) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{label}</text>')
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, ty))
        parts.append(f'<polyline fill="none" stroke="#1f5fa8" stroke-width="1.5" points="{pts}"/>')
    parts.append(f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    parts.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{_escape(xlabel)}</text>')
    ylab = ylabel + (" (log scale)" if log_y else "")
    parts.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{_escape(ylab)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_chart(path: str | Path, x, y, title: str, **kw) -> Path:
    path = Path(path)
    path.write_text(line_chart(x, y, title, **kw))
    return path

