"""Static SVG line plots written by hand (no rendering dependency)."""

from xml.sax.saxutils import escape

W, H = 420, 360
MARGIN = dict(left=56, right=16, top=30, bottom=46)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v):
    return f"{v:.4g}"


def line_plot(path, series, title="", xlabel="", ylabel="", xlim=None, ylim=None, diagonal=False, ticks=5):
    """Write ``series`` (list of ``(label, xs, ys)``) as an SVG line chart."""
    xs_all = [float(x) for _, xs, _ in series for x in xs]
    ys_all = [float(y) for _, _, ys in series for y in ys if y == y]
    x0, x1 = xlim or (min(xs_all, default=0.0), max(xs_all, default=1.0))
    y0, y1 = ylim or (min(ys_all, default=0.0), max(ys_all, default=1.0))
    if x1 <= x0:
        x0, x1 = x0 - 0.5, x0 + 0.5
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y0 + 0.5
    pw = W - MARGIN["left"] - MARGIN["right"]
    ph = H - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
           'fill="none" stroke="black"/>']
    for i in range(ticks + 1):
        tx = x0 + (x1 - x0) * i / ticks
        ty = y0 + (y1 - y0) * i / ticks
        out.append(f'<line x1="{px(tx):.2f}" y1="{py(y0):.2f}" x2="{px(tx):.2f}" y2="{py(y0) + 4:.2f}" stroke="black"/>')
        out.append(f'<text x="{px(tx):.2f}" y="{py(y0) + 16:.2f}" font-size="10" text-anchor="middle">{_fmt(tx)}</text>')
        out.append(f'<line x1="{px(x0) - 4:.2f}" y1="{py(ty):.2f}" x2="{px(x0):.2f}" y2="{py(ty):.2f}" stroke="black"/>')
        out.append(f'<text x="{px(x0) - 6:.2f}" y="{py(ty) + 3:.2f}" font-size="10" text-anchor="end">{_fmt(ty)}</text>')
    if diagonal:
        out.append(f'<line x1="{px(x0):.2f}" y1="{py(y0):.2f}" x2="{px(x1):.2f}" y2="{py(y1):.2f}" '
                   'stroke="gray" stroke-dasharray="4 3"/>')
    for i, (label, xs, ys) in enumerate(series):
        pts = " ".join(f"{px(float(x)):.2f},{py(float(y)):.2f}" for x, y in zip(xs, ys) if y == y)
        color = COLORS[i % len(COLORS)]
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        ly = MARGIN["top"] + 14 + 14 * i
        lx = MARGIN["left"] + pw - 120
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 16}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 20}" y="{ly}" font-size="10">{escape(str(label))}</text>')
    out.append(f'<text x="{W / 2:.1f}" y="18" font-size="12" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{H - 8}" font-size="11" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{MARGIN["top"] + ph / 2:.1f}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 14 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def roc_plot(path, roc, title):
    line_plot(path, [(f"AUROC {roc.auroc:.3f}", roc.fpr, roc.tpr)], title=title,
              xlabel="false positive rate", ylabel="true positive rate",
              xlim=(0.0, 1.0), ylim=(0.0, 1.0), diagonal=True)
