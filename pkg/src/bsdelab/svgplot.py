"""Minimal self-contained SVG line plots (line + optional band).

No rendering dependencies: the output is a deterministic UTF-8 string
built from the input arrays, so identical data always produces an
identical file.
"""

from __future__ import annotations

import numpy as np

__all__ = ["render_line_plot"]

_WIDTH = 640
_HEIGHT = 400
_MARGIN_LEFT = 64.0
_MARGIN_RIGHT = 18.0
_MARGIN_TOP = 34.0
_MARGIN_BOTTOM = 48.0
_PALETTE = ("#1f6fb2", "#c0392b", "#2d8a4e", "#8e44ad", "#b8860b", "#16777e")
_FONT = 'font-family="Helvetica,Arial,sans-serif"'


def _axis_range(values: np.ndarray) -> tuple[float, float]:
    lo = float(np.min(values))
    hi = float(np.max(values))
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise ValueError("plot data must be finite")
    if hi - lo < 1e-12:
        pad = 1.0 if hi == 0.0 else abs(hi) * 0.1 + 1e-12
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def _fmt(v: float) -> str:
    return f"{v:.6g}"


class _Frame:
    def __init__(self, x_lo, x_hi, y_lo, y_hi):
        self.x_lo, self.x_hi = x_lo, x_hi
        self.y_lo, self.y_hi = y_lo, y_hi
        self.plot_w = _WIDTH - _MARGIN_LEFT - _MARGIN_RIGHT
        self.plot_h = _HEIGHT - _MARGIN_TOP - _MARGIN_BOTTOM

    def px(self, x):
        return _MARGIN_LEFT + (np.asarray(x) - self.x_lo) / (self.x_hi - self.x_lo) * self.plot_w

    def py(self, y):
        return _MARGIN_TOP + (self.y_hi - np.asarray(y)) / (self.y_hi - self.y_lo) * self.plot_h


def _polyline_points(xs, ys) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def render_line_plot(
    x,
    curves,
    *,
    bands=None,
    title: str = "",
    x_label: str = "",
    y_label: str = "",
) -> str:
    """Render labelled curves over a shared abscissa.

    ``curves`` is a sequence of ``(label, values)``; ``bands`` is an
    optional parallel sequence of ``(lo, hi)`` pairs (or None entries)
    drawn as translucent ribbons behind the matching curve.
    """
    x = np.asarray(x, dtype=float)
    curves = [(label, np.asarray(v, dtype=float)) for label, v in curves]
    if not curves:
        raise ValueError("need at least one curve")
    for label, v in curves:
        if v.shape != x.shape:
            raise ValueError(f"curve {label!r} has shape {v.shape}, expected {x.shape}")
    if bands is None:
        bands = [None] * len(curves)
    if len(bands) != len(curves):
        raise ValueError("bands must align with curves")

    stacked = [v for _, v in curves]
    for band in bands:
        if band is not None:
            stacked.extend(np.asarray(side, dtype=float) for side in band)
    x_lo, x_hi = _axis_range(x)
    y_lo, y_hi = _axis_range(np.concatenate([np.ravel(v) for v in stacked]))
    frame = _Frame(x_lo, x_hi, y_lo, y_hi)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
    ]
    # gridlines and tick labels
    for i in range(5):
        ty = y_lo + (y_hi - y_lo) * i / 4
        py = frame.py(ty)
        parts.append(
            f'<line x1="{_MARGIN_LEFT:.2f}" y1="{py:.2f}" x2="{_WIDTH - _MARGIN_RIGHT:.2f}" '
            f'y2="{py:.2f}" stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_MARGIN_LEFT - 6:.2f}" y="{py + 4:.2f}" text-anchor="end" '
            f'font-size="11" {_FONT}>{_fmt(ty)}</text>'
        )
        tx = x_lo + (x_hi - x_lo) * i / 4
        px = frame.px(tx)
        parts.append(
            f'<text x="{px:.2f}" y="{_HEIGHT - _MARGIN_BOTTOM + 16:.2f}" text-anchor="middle" '
            f'font-size="11" {_FONT}>{_fmt(tx)}</text>'
        )
    parts.append(
        f'<rect x="{_MARGIN_LEFT:.2f}" y="{_MARGIN_TOP:.2f}" width="{frame.plot_w:.2f}" '
        f'height="{frame.plot_h:.2f}" fill="none" stroke="#333333" stroke-width="1"/>'
    )

    for idx, band in enumerate(bands):
        if band is None:
            continue
        lo, hi = (np.asarray(side, dtype=float) for side in band)
        color = _PALETTE[idx % len(_PALETTE)]
        ring_x = np.concatenate([x, x[::-1]])
        ring_y = np.concatenate([hi, lo[::-1]])
        parts.append(
            f'<polygon points="{_polyline_points(frame.px(ring_x), frame.py(ring_y))}" '
            f'fill="{color}" fill-opacity="0.18" stroke="none"/>'
        )
    for idx, (label, v) in enumerate(curves):
        color = _PALETTE[idx % len(_PALETTE)]
        parts.append(
            f'<polyline points="{_polyline_points(frame.px(x), frame.py(v))}" '
            f'fill="none" stroke="{color}" stroke-width="1.8"/>'
        )
        parts.append(
            f'<text x="{_WIDTH - _MARGIN_RIGHT - 6:.2f}" y="{_MARGIN_TOP + 16 + 15 * idx:.2f}" '
            f'text-anchor="end" font-size="12" fill="{color}" {_FONT}>{label}</text>'
        )

    if title:
        parts.append(
            f'<text x="{_WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="14" {_FONT}>'
            f"{title}</text>"
        )
    if x_label:
        parts.append(
            f'<text x="{(_MARGIN_LEFT + _WIDTH - _MARGIN_RIGHT) / 2:.2f}" '
            f'y="{_HEIGHT - 10:.2f}" text-anchor="middle" font-size="12" {_FONT}>{x_label}</text>'
        )
    if y_label:
        cx, cy = 16.0, (_MARGIN_TOP + _HEIGHT - _MARGIN_BOTTOM) / 2
        parts.append(
            f'<text x="{cx:.2f}" y="{cy:.2f}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 {cx:.2f} {cy:.2f})" {_FONT}>{y_label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
