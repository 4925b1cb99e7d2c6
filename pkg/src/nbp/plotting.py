"""Static SVG figures written by hand (no plotting library).

Two figure types: a function panel (sample paths, their mean, context
circles, target crosses) and an overlay of training-loss curves.  Every path
gets a ``class`` attribute so the output is easy to inspect and count, and
coordinates are printed with fixed precision so the files are reproducible.
"""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, MARGIN = 640, 400, 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class _Frame:
    def __init__(self, xs: np.ndarray, ys: np.ndarray):
        xs, ys = xs[np.isfinite(xs)], ys[np.isfinite(ys)]
        self.x0, self.x1 = _pad(float(xs.min()), float(xs.max()))
        self.y0, self.y1 = _pad(float(ys.min()), float(ys.max()))

    def px(self, x) -> np.ndarray:
        return MARGIN + (np.asarray(x, float) - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)

    def py(self, y) -> np.ndarray:
        return HEIGHT - MARGIN - (np.asarray(y, float) - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)


def _pad(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo < 1e-12:
        return lo - 1.0, hi + 1.0
    span = hi - lo
    return lo - 0.05 * span, hi + 0.05 * span


def _polyline(frame: _Frame, x, y) -> str:
    px, py = frame.px(x), frame.py(y)
    pts = " L".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    return "M" + pts


def _axes(frame: _Frame, title: str, xlabel: str, ylabel: str) -> list[str]:
    out = [
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
        f'<text x="{WIDTH / 2:.1f}" y="{MARGIN / 2:.1f}" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for v in np.linspace(frame.x0, frame.x1, 5):
        out.append(f'<text x="{frame.px(v):.2f}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle" font-size="10">{v:.3g}</text>')
    for v in np.linspace(frame.y0, frame.y1, 5):
        out.append(f'<text x="{MARGIN - 4}" y="{frame.py(v):.2f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    return out


def _document(body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">\n<rect width="100%" height="100%" fill="white"/>'
    )
    return head + "\n" + "\n".join(body) + "\n</svg>\n"


def function_panel_svg(
    x: np.ndarray,
    samples: np.ndarray,
    x_context: np.ndarray | None = None,
    y_context: np.ndarray | None = None,
    x_target: np.ndarray | None = None,
    y_target: np.ndarray | None = None,
    title: str = "conditional samples",
) -> str:
    """Panel for 1-D inputs: ``samples`` is (S, M) evaluated at the M inputs ``x``.

    Draws one thin path per sample and a black path for the sample mean.
    """
    x = np.asarray(x, float).reshape(-1)
    samples = np.atleast_2d(np.asarray(samples, float))
    if samples.shape[1] != x.size:
        raise ValueError(f"samples have {samples.shape[1]} points, x has {x.size}")
    order = np.argsort(x, kind="stable")
    xs, ss = x[order], samples[:, order]
    mean = ss.mean(axis=0)
    pts_x = [xs]
    pts_y = [ss.reshape(-1)]
    for a, b in ((x_context, y_context), (x_target, y_target)):
        if a is not None and b is not None and np.size(a):
            pts_x.append(np.asarray(a, float).reshape(-1))
            pts_y.append(np.asarray(b, float).reshape(-1))
    frame = _Frame(np.concatenate(pts_x), np.concatenate(pts_y))
    body = _axes(frame, title, "x", "y")
    for i, row in enumerate(ss):
        body.append(
            f'<path class="sample" d="{_polyline(frame, xs, row)}" fill="none" '
            f'stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1" stroke-opacity="0.5"/>'
        )
    body.append(f'<path class="mean" d="{_polyline(frame, xs, mean)}" fill="none" stroke="black" stroke-width="2"/>')
    if x_target is not None and y_target is not None:
        body.append('<g class="targets" stroke="#333" stroke-width="1.2">')
        for a, b in zip(frame.px(np.reshape(x_target, -1)), frame.py(np.reshape(y_target, -1))):
            body.append(f'<line x1="{a - 3:.2f}" y1="{b - 3:.2f}" x2="{a + 3:.2f}" y2="{b + 3:.2f}"/>')
            body.append(f'<line x1="{a - 3:.2f}" y1="{b + 3:.2f}" x2="{a + 3:.2f}" y2="{b - 3:.2f}"/>')
        body.append("</g>")
    if x_context is not None and y_context is not None:
        for a, b in zip(frame.px(np.reshape(x_context, -1)), frame.py(np.reshape(y_context, -1))):
            body.append(f'<circle class="context" cx="{a:.2f}" cy="{b:.2f}" r="4" fill="white" stroke="black" stroke-width="1.5"/>')
    return _document(body)


def loss_curves_svg(curves: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "training loss") -> str:
    """Overlay of ``label -> (steps, losses)`` curves on a log-scaled loss axis."""
    if not curves:
        raise ValueError("no curves to plot")
    all_x = np.concatenate([np.asarray(s, float) for s, _ in curves.values()])
    logs = {k: np.log10(np.maximum(np.asarray(v, float), 1e-12)) for k, (_, v) in curves.items()}
    frame = _Frame(all_x, np.concatenate(list(logs.values())))
    body = _axes(frame, title, "step", "log10 loss")
    for i, (label, (steps, _)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        body.append(
            f'<path class="loss" data-label="{escape(label)}" d="{_polyline(frame, steps, logs[label])}" '
            f'fill="none" stroke="{color}" stroke-width="1.2"/>'
        )
        y = MARGIN + 16 + 16 * i
        body.append(f'<line x1="{WIDTH - MARGIN - 110}" y1="{y - 4}" x2="{WIDTH - MARGIN - 90}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{WIDTH - MARGIN - 86}" y="{y}" font-size="11">{escape(label)}</text>')
    return _document(body)


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; the first points average over what is available."""
    v = np.asarray(values, float)
    if window <= 1 or v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
