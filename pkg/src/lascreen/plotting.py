"""Dependency-free SVG caterpillar plots.

Output is a pure function of the inputs: numbers are written with fixed
precision and elements in rank order, so identical series give identical bytes.
"""
from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd

FLAG_COLOURS = {"high": "#b2182b", "low": "#2166ac", "none": "#4d4d4d"}


@dataclass(frozen=True)
class CaterpillarOptions:
    width: int = 900
    height: int = 420
    margin: int = 50
    title: str = ""
    ylabel: str = "Estimate"


def _f(x: float) -> str:
    return f"{x:.2f}"


def render_caterpillar(series: pd.DataFrame, options: CaterpillarOptions | None = None) -> str:
    """Rank-ordered estimates with interval bars and a zero line.

    ``series`` needs columns rank, id, estimate, lo, hi, flag (as produced by
    ``caterpillar_data``).  Flagged units are drawn in colour.
    """
    opt = options or CaterpillarOptions()
    if len(series) == 0:
        raise ValueError("cannot plot an empty series")
    s = series.sort_values("rank", kind="mergesort")
    est, lo, hi = (s[c].to_numpy(float) for c in ("estimate", "lo", "hi"))
    ymin, ymax = min(lo.min(), 0.0), max(hi.max(), 0.0)
    if ymax - ymin <= 0:
        ymin, ymax = -1.0, 1.0
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad
    m, W, H = opt.margin, opt.width, opt.height
    pw, ph = W - 2 * m, H - 2 * m
    k = len(s)

    def x_at(i):
        return m + pw * (i + 0.5) / k

    def y_at(v):
        return m + ph * (ymax - v) / (ymax - ymin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
    ]
    if opt.title:
        parts.append(f'<text x="{_f(W / 2)}" y="{_f(m / 2)}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="14">{escape(opt.title)}</text>')
    parts.append(f'<text x="12" y="{_f(m + ph / 2)}" transform="rotate(-90 12 {_f(m + ph / 2)})" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="12">{escape(opt.ylabel)}</text>')
    parts.append(f'<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>')
    for v in np.linspace(ymin + pad, ymax - pad, 5):
        parts.append(f'<text x="{m - 4}" y="{_f(y_at(v) + 4)}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{v:.3f}</text>')
    parts.append(f'<line class="zero" x1="{m}" y1="{_f(y_at(0.0))}" x2="{m + pw}" '
                 f'y2="{_f(y_at(0.0))}" stroke="black" stroke-dasharray="4 3"/>')
    for i, (uid, e, a, b, flag) in enumerate(zip(s["id"], est, lo, hi, s["flag"])):
        colour = FLAG_COLOURS.get(flag, FLAG_COLOURS["none"])
        x = _f(x_at(i))
        parts.append(
            f'<g class="unit flag-{escape(str(flag))}"><title>{escape(str(uid))}</title>'
            f'<line x1="{x}" y1="{_f(y_at(a))}" x2="{x}" y2="{_f(y_at(b))}" stroke="{colour}"/>'
            f'<circle cx="{x}" cy="{_f(y_at(e))}" r="2" fill="{colour}"/></g>'
        )
    parts.append(f'<text x="{_f(m + pw / 2)}" y="{H - 12}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">Rank (1 to {k})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
