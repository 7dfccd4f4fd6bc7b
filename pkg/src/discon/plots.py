"""Minimal deterministic SVG emission: token scatters and metric curves.

Hand-rolled rather than a plotting library so identical inputs give byte
identical files (no timestamps, no renderer versions in the output).
"""

from __future__ import annotations

import numpy as np

WIDTH, HEIGHT = 640, 480
MARGIN = 48

PALETTE = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee",
    "#aa3377", "#bbbbbb", "#000000", "#e69f00", "#56b4e9",
]


def _f(v: float) -> str:
    return f"{v:.2f}"


def _limits(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return 0.0, 1.0
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, xlim, ylim, xlabel: str, ylabel: str, title: str):
        self.xlim, self.ylim = xlim, ylim
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        ]
        x0, y0 = MARGIN, HEIGHT - MARGIN
        x1, y1 = WIDTH - MARGIN, MARGIN
        self.parts.append(
            f'<path d="M {x0} {y1} L {x0} {y0} L {x1} {y0}" stroke="black" fill="none"/>'
        )
        for frac in (0.0, 0.5, 1.0):
            xv = xlim[0] + frac * (xlim[1] - xlim[0])
            yv = ylim[0] + frac * (ylim[1] - ylim[0])
            px = x0 + frac * (x1 - x0)
            py = y0 - frac * (y0 - y1)
            self.parts.append(
                f'<text x="{_f(px)}" y="{y0 + 16}" text-anchor="middle" font-size="10">{_f(xv)}</text>'
            )
            self.parts.append(
                f'<text x="{x0 - 6}" y="{_f(py + 3)}" text-anchor="end" font-size="10">{_f(yv)}</text>'
            )
        self.parts.append(
            f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{xlabel}</text>'
        )
        self.parts.append(
            f'<text x="14" y="{(y0 + y1) // 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 14 {(y0 + y1) // 2})">{ylabel}</text>'
        )

    def to_px(self, x: float, y: float) -> tuple[float, float]:
        fx = (x - self.xlim[0]) / (self.xlim[1] - self.xlim[0])
        fy = (y - self.ylim[0]) / (self.ylim[1] - self.ylim[0])
        return MARGIN + fx * (WIDTH - 2 * MARGIN), HEIGHT - MARGIN - fy * (HEIGHT - 2 * MARGIN)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def scatter_svg(points: np.ndarray, colors: np.ndarray | None = None,
                title: str = "", xlabel: str = "dim 0", ylabel: str = "dim 1") -> str:
    """2-D point cloud; colors are integer group ids into the fixed palette."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if colors is None:
        colors = np.zeros(len(points), dtype=np.int64)
    canvas = _Canvas(_limits(points[:, 0]), _limits(points[:, 1]), xlabel, ylabel, title)
    for (x, y), c in zip(points, np.asarray(colors)):
        px, py = canvas.to_px(float(x), float(y))
        canvas.parts.append(
            f'<circle cx="{_f(px)}" cy="{_f(py)}" r="2" fill="{PALETTE[int(c) % len(PALETTE)]}"/>'
        )
    return canvas.render()


def curve_svg(series: dict[str, list[tuple[float, float]]],
              title: str = "", xlabel: str = "x", ylabel: str = "y") -> str:
    """One polyline per named series, with a small legend."""
    xs = np.array([p[0] for pts in series.values() for p in pts], dtype=np.float64)
    ys = np.array([p[1] for pts in series.values() for p in pts], dtype=np.float64)
    canvas = _Canvas(_limits(xs), _limits(ys), xlabel, ylabel, title)
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        if pts:
            coords = " ".join(_f(v) for p in pts for v in canvas.to_px(p[0], p[1]))
            canvas.parts.append(
                f'<polyline points="{coords}" stroke="{color}" fill="none" stroke-width="1.5"/>'
            )
        canvas.parts.append(
            f'<text x="{WIDTH - MARGIN - 4}" y="{MARGIN + 14 + 14 * i}" text-anchor="end" '
            f'font-size="11" fill="{color}">{name}</text>'
        )
    return canvas.render()
