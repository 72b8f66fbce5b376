"""Standalone SVG charts written as plain text (no plotting dependency)."""

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(v):
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _svg(width, height, body):
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
    )
    return head + "\n".join(body) + "\n</svg>\n"


def _ticks(lo, hi, n=5):
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    return lo, hi, list(np.linspace(lo, hi, n))


class _Axes:
    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim, self.ylim = xlim, ylim

    def px(self, x):
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * self.w

    def py(self, y):
        lo, hi = self.ylim
        return self.y0 + self.h - (y - lo) / (hi - lo) * self.h

    def frame(self, xticks, yticks, xlabel, ylabel, xtick_labels=None):
        out = [
            f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}" fill="none" stroke="black"/>'
        ]
        for i, t in enumerate(xticks):
            x = self.px(t)
            label = xtick_labels[i] if xtick_labels else _fmt(t)
            out.append(f'<line x1="{x:.1f}" y1="{self.y0 + self.h}" x2="{x:.1f}" y2="{self.y0 + self.h + 4}" stroke="black"/>')
            out.append(f'<text x="{x:.1f}" y="{self.y0 + self.h + 18}" text-anchor="middle">{escape(label)}</text>')
        for t in yticks:
            y = self.py(t)
            out.append(f'<line x1="{self.x0 - 4}" y1="{y:.1f}" x2="{self.x0}" y2="{y:.1f}" stroke="black"/>')
            out.append(f'<text x="{self.x0 - 7}" y="{y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
        out.append(
            f'<text x="{self.x0 + self.w / 2:.1f}" y="{self.y0 + self.h + 38}" text-anchor="middle">{escape(xlabel)}</text>'
        )
        cy = self.y0 + self.h / 2
        out.append(
            f'<text x="16" y="{cy:.1f}" text-anchor="middle" transform="rotate(-90 16 {cy:.1f})">{escape(ylabel)}</text>'
        )
        return out


def line_plot(series, title, xlabel, ylabel):
    """``series`` maps a label to a sorted list of (x, y) points."""
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0]
    ys = [p[1] for p in pts] or [0.0]
    xlo, xhi, _ = _ticks(min(xs), max(xs))
    pad = 0.05 * (max(ys) - min(ys) or 1.0)
    ylo, yhi, yticks = _ticks(min(ys) - pad, max(ys) + pad)
    ax = _Axes(70, 40, 420, 260, (xlo, xhi), (ylo, yhi))
    body = [f'<text x="280" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>']
    body += ax.frame(sorted(set(xs)), yticks, xlabel, ylabel)
    for i, (label, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{ax.px(x):.1f},{ax.py(y):.1f}" for x, y in s)
        body.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in s:
            body.append(f'<circle cx="{ax.px(x):.1f}" cy="{ax.py(y):.1f}" r="3" fill="{color}"/>')
        ly = 50 + 16 * i
        body.append(f'<line x1="505" y1="{ly}" x2="525" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="530" y="{ly + 4}">{escape(label)}</text>')
    return _svg(640, 350, body)


def bar_chart(bars, title, ylabel):
    """``bars`` is a list of (label, value) pairs."""
    vals = [v for _, v in bars] or [0.0]
    lo = min(vals)
    hi = max(vals)
    pad = 0.1 * (hi - lo or abs(hi) or 1.0)
    ylo, yhi, yticks = _ticks(lo - pad, hi + pad)
    n = max(len(bars), 1)
    ax = _Axes(70, 40, 80 * n + 40, 260, (0, n), (ylo, yhi))
    body = [f'<text x="{70 + ax.w / 2:.1f}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>']
    body += ax.frame([], yticks, "", ylabel)
    for i, (label, v) in enumerate(bars):
        x = ax.px(i + 0.5)
        top = ax.py(v)
        base = ax.py(ylo)
        body.append(
            f'<rect x="{x - 25:.1f}" y="{top:.1f}" width="50" height="{base - top:.1f}" fill="{PALETTE[i % len(PALETTE)]}"/>'
        )
        body.append(f'<text x="{x:.1f}" y="{top - 4:.1f}" text-anchor="middle">{v:.4f}</text>')
        body.append(f'<text x="{x:.1f}" y="{ax.y0 + ax.h + 18}" text-anchor="middle">{escape(label)}</text>')
    return _svg(int(ax.w + 110), 350, body)


def table(rows, columns, title):
    """A plain grid; ``rows`` is a list of (row label, list of cell strings)."""
    cw, lw, rh = 90, 240, 24
    width = lw + cw * len(columns) + 20
    height = 50 + rh * (len(rows) + 1) + 10
    body = [f'<text x="10" y="24" font-size="14">{escape(title)}</text>']
    y = 40
    for j, c in enumerate(columns):
        body.append(f'<text x="{lw + cw * j + cw / 2:.0f}" y="{y + 16}" text-anchor="middle" font-weight="bold">{escape(c)}</text>')
    body.append(f'<line x1="10" y1="{y + rh}" x2="{width - 10}" y2="{y + rh}" stroke="black"/>')
    for i, (label, cells) in enumerate(rows):
        ry = y + rh * (i + 1)
        body.append(f'<text x="10" y="{ry + 16}">{escape(label)}</text>')
        for j, cell in enumerate(cells):
            body.append(f'<text x="{lw + cw * j + cw / 2:.0f}" y="{ry + 16}" text-anchor="middle">{escape(cell)}</text>')
    return _svg(width, height, body)
