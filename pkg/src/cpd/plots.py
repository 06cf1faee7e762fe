"""Static SVG line charts for metrics files. No interactive parts: plain
polylines, one circle per data point, an optional vertical stage marker,
and a text legend."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

Palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 30, 40


@dataclass
class Series:
    name: str
    xs: list[float]
    ys: list[float]
    markers: list[float] = field(default_factory=list)  # x positions of stage changes


def _span(lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        pad = max(abs(lo), 1.0) * 0.05
        return lo - pad, lo + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def render_chart(series: list[Series], title: str, ylabel: str, out_path: str | Path) -> None:
    """Write one SVG chart overlaying all series, legend keyed by name."""
    xs = [x for s in series for x in s.xs]
    ys = [y for s in series for y in s.ys]
    if not xs:
        raise ValueError("nothing to plot")
    x_lo, x_hi = _span(min(xs), max(xs))
    y_lo, y_hi = _span(min(ys), max(ys))

    def px(x: float) -> float:
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R)

    def py(y: float) -> float:
        return HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{MARGIN_L}" y1="{HEIGHT - MARGIN_B}" x2="{WIDTH - MARGIN_R}" '
        f'y2="{HEIGHT - MARGIN_B}" stroke="black"/>',
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{HEIGHT - MARGIN_B}" stroke="black"/>',
        f'<text x="14" y="{HEIGHT / 2:.1f}" transform="rotate(-90 14 {HEIGHT / 2:.1f})" '
        f'text-anchor="middle" font-size="12">{ylabel}</text>',
        f'<text x="{MARGIN_L}" y="{HEIGHT - 8}" font-size="10">{min(xs):g}</text>',
        f'<text x="{WIDTH - MARGIN_R}" y="{HEIGHT - 8}" text-anchor="end" font-size="10">{max(xs):g}</text>',
        f'<text x="{MARGIN_L - 6}" y="{py(min(ys)):.1f}" text-anchor="end" font-size="10">{min(ys):.4g}</text>',
        f'<text x="{MARGIN_L - 6}" y="{py(max(ys)):.1f}" text-anchor="end" font-size="10">{max(ys):.4g}</text>',
    ]
    for idx, s in enumerate(series):
        color = Palette[idx % len(Palette)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s.xs, s.ys))
        parts.append(
            f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        for x, y in zip(s.xs, s.ys):
            parts.append(
                f'<circle class="point" cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>'
            )
        for mx in s.markers:
            parts.append(
                f'<line class="stage-marker" x1="{px(mx):.2f}" y1="{MARGIN_T}" '
                f'x2="{px(mx):.2f}" y2="{HEIGHT - MARGIN_B}" stroke="{color}" '
                f'stroke-dasharray="4 3" data-epoch="{mx:g}"/>'
            )
        parts.append(
            f'<text class="legend" x="{WIDTH - MARGIN_R - 6}" y="{MARGIN_T + 16 * (idx + 1)}" '
            f'text-anchor="end" font-size="12" fill="{color}">{s.name}</text>'
        )
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts) + "\n", encoding="utf-8")
