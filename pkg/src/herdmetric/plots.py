"""Dependency-free SVG emitters: accuracy vs openness, PR curves, 2-D scatter."""
from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

W, H = 640, 440
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 30, 60


class _Axes:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim

    def px(self, x):
        span = (self.x1 - self.x0) or 1.0
        return LEFT + (x - self.x0) / span * (W - LEFT - RIGHT)

    def py(self, y):
        span = (self.y1 - self.y0) or 1.0
        return H - BOTTOM - (y - self.y0) / span * (H - TOP - BOTTOM)


def _fmt(v):
    return f"{v:.2f}"


def _frame(ax, title, xlabel, ylabel, xticks, yticks):
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.0f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>']
    xa, xb = ax.px(ax.x0), ax.px(ax.x1)
    ya, yb = ax.py(ax.y0), ax.py(ax.y1)
    out.append(f'<line x1="{_fmt(xa)}" y1="{_fmt(ya)}" x2="{_fmt(xb)}" y2="{_fmt(ya)}" stroke="black"/>')
    out.append(f'<line x1="{_fmt(xa)}" y1="{_fmt(ya)}" x2="{_fmt(xa)}" y2="{_fmt(yb)}" stroke="black"/>')
    for t in xticks:
        x = ax.px(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(ya)}" x2="{_fmt(x)}" y2="{_fmt(ya + 5)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{_fmt(ya + 18)}" text-anchor="middle" font-size="11">{t:g}</text>')
    for t in yticks:
        y = ax.py(t)
        out.append(f'<line x1="{_fmt(xa - 5)}" y1="{_fmt(y)}" x2="{_fmt(xa)}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(xa - 8)}" y="{_fmt(y + 4)}" text-anchor="end" font-size="11">{t:g}</text>')
    out.append(f'<text x="{_fmt((xa + xb) / 2)}" y="{H - 15}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{_fmt((ya + yb) / 2)}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 18 {_fmt((ya + yb) / 2)})">{escape(ylabel)}</text>')
    return out


def _legend(names):
    out = []
    for i, name in enumerate(names):
        y = TOP + 20 + 18 * i
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{W - RIGHT + 15}" y1="{y}" x2="{W - RIGHT + 35}" y2="{y}" '
                   f'stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 40}" y="{y + 4}" font-size="11">{escape(str(name))}</text>')
    return out


def accuracy_vs_openness_svg(summary) -> str:
    """One polyline of mean accuracy per loss kind, with min/max whiskers."""
    kinds = []
    for s in summary:
        if s.loss_kind not in kinds:
            kinds.append(s.loss_kind)
    ax = _Axes((0.0, 1.0), (0.0, 1.0))
    ticks = [0, 0.2, 0.4, 0.6, 0.8, 1.0]
    out = _frame(ax, "Accuracy vs openness", "openness (fraction of identities unknown)",
                 "accuracy", ticks, ticks)
    for i, k in enumerate(kinds):
        c = PALETTE[i % len(PALETTE)]
        rows = sorted((s for s in summary if s.loss_kind == k), key=lambda s: s.ratio)
        pts = " ".join(f"{_fmt(ax.px(s.ratio))},{_fmt(ax.py(s.mean))}" for s in rows)
        out.append(f'<polyline class="series" data-loss="{escape(k)}" points="{pts}" '
                   f'fill="none" stroke="{c}" stroke-width="2"/>')
        for s in rows:
            x = ax.px(s.ratio)
            out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(ax.py(s.min))}" x2="{_fmt(x)}" '
                       f'y2="{_fmt(ax.py(s.max))}" stroke="{c}"/>')
            for v in (s.min, s.max):
                out.append(f'<line x1="{_fmt(x - 4)}" y1="{_fmt(ax.py(v))}" x2="{_fmt(x + 4)}" '
                           f'y2="{_fmt(ax.py(v))}" stroke="{c}"/>')
            out.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(ax.py(s.mean))}" r="3" fill="{c}"/>')
    out += _legend(kinds)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def pr_curve_svg(precision, recall, ap: float) -> str:
    ax = _Axes((0.0, 1.0), (0.0, 1.05))
    ticks = [0, 0.2, 0.4, 0.6, 0.8, 1.0]
    out = _frame(ax, f"Precision-recall (AP = {ap:.4f})", "recall", "precision", ticks, ticks)
    pts = [(0.0, precision[0] if len(precision) else 0.0)] + list(zip(recall, precision))
    out.append('<polyline class="series" data-loss="pr" points="'
               + " ".join(f"{_fmt(ax.px(r))},{_fmt(ax.py(p))}" for r, p in pts)
               + '" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(points, labels, title="PCA projection of embeddings", hollow=None) -> str:
    """2-D scatter coloured by label; ``hollow`` marks points drawn as open circles."""
    if len(points) == 0:
        raise ValueError("nothing to plot")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    pad_x = (max(xs) - min(xs)) * 0.05 or 1.0
    pad_y = (max(ys) - min(ys)) * 0.05 or 1.0
    ax = _Axes((min(xs) - pad_x, max(xs) + pad_x), (min(ys) - pad_y, max(ys) + pad_y))
    xt = [round(ax.x0 + i * (ax.x1 - ax.x0) / 4, 2) for i in range(5)]
    yt = [round(ax.y0 + i * (ax.y1 - ax.y0) / 4, 2) for i in range(5)]
    out = _frame(ax, title, "component 1", "component 2", xt, yt)
    uniq = sorted(set(labels))
    colour = {l: PALETTE[i % len(PALETTE)] for i, l in enumerate(uniq)}
    for i, ((x, y), l) in enumerate(zip(points, labels)):
        c = colour[l]
        fill = "none" if hollow is not None and hollow[i] else c
        out.append(f'<circle cx="{_fmt(ax.px(x))}" cy="{_fmt(ax.py(y))}" r="2.5" '
                   f'fill="{fill}" stroke="{c}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
