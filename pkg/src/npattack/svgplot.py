"""Minimal SVG polyline charts; CSV stays the authoritative output."""

from __future__ import annotations

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (count - 1)
    return [lo + i * step for i in range(count)]


def line_chart(path, series, title="", xlabel="", ylabel="",
               width=640, height=420):
    """Write a deterministic line chart; series is [(label, xs, ys), ...]."""
    margin_l, margin_r, margin_t, margin_b = 60, 20, 30, 45
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b

    all_x = [float(x) for _, xs, _ in series for x in xs]
    all_y = [float(y) for _, _, ys in series for y in ys]
    x_lo, x_hi = (min(all_x), max(all_x)) if all_x else (0.0, 1.0)
    y_lo, y_hi = (min(all_y), max(all_y)) if all_y else (0.0, 1.0)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0

    def px(x):
        return margin_l + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y):
        return margin_t + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    axis = f'{margin_l} {margin_t + plot_h}'
    out.append(f'<polyline points="{margin_l} {margin_t}, {axis}, '
               f'{margin_l + plot_w} {margin_t + plot_h}" '
               f'fill="none" stroke="black" stroke-width="1"/>')
    for tx in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{px(tx):.1f}" y1="{margin_t + plot_h}" '
                   f'x2="{px(tx):.1f}" y2="{margin_t + plot_h + 5}" stroke="black"/>')
        out.append(f'<text x="{px(tx):.1f}" y="{margin_t + plot_h + 18}" '
                   f'text-anchor="middle" font-family="sans-serif" font-size="10">'
                   f'{tx:g}</text>')
    for ty in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{margin_l - 5}" y1="{py(ty):.1f}" '
                   f'x2="{margin_l}" y2="{py(ty):.1f}" stroke="black"/>')
        out.append(f'<text x="{margin_l - 8}" y="{py(ty):.1f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{ty:g}</text>')
    out.append(f'<text x="{margin_l + plot_w / 2:.1f}" y="{height - 8}" '
               f'text-anchor="middle" font-family="sans-serif" font-size="12">{xlabel}</text>')
    out.append(f'<text x="14" y="{margin_t + plot_h / 2:.1f}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 14 {margin_t + plot_h / 2:.1f})">{ylabel}</text>')

    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        points = ", ".join(f"{px(float(x)):.2f} {py(float(y)):.2f}"
                           for x, y in zip(xs, ys))
        out.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        ly = margin_t + 14 + 16 * i
        lx = margin_l + plot_w - 150
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 24}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{lx + 30}" y="{ly}" font-family="sans-serif" '
                   f'font-size="11">{label}</text>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")
