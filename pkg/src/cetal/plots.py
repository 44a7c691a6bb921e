"""Dependency-free SVG charts for evaluation reports."""

from __future__ import annotations

from xml.sax.saxutils import escape


def _svg(width, height, body):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )


def map_curve_svg(thresholds, series, title="mAP vs tIoU threshold", width=420, height=300):
    """Line chart; ``series`` maps a legend name to one mAP value per threshold."""
    left, right, top, bottom = 50, 110, 30, 40
    pw, ph = width - left - right, height - top - bottom
    lo, hi = min(thresholds), max(thresholds)
    span = (hi - lo) or 1.0

    def px(t):
        return left + (t - lo) / span * pw

    def py(v):
        return top + (1.0 - v) * ph

    body = [f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{escape(title)}</text>']
    body.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>')
    for k in range(6):
        v = k / 5
        body.append(f'<line x1="{left}" y1="{py(v):.1f}" x2="{left + pw}" y2="{py(v):.1f}" stroke="#eee"/>')
        body.append(f'<text x="{left - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    for t in thresholds:
        body.append(f'<text x="{px(t):.1f}" y="{top + ph + 16}" text-anchor="middle">{t:g}</text>')
    body.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">tIoU threshold</text>')
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]
    for n, (name, values) in enumerate(series.items()):
        color = palette[n % len(palette)]
        pts = " ".join(f"{px(t):.1f},{py(v):.1f}" for t, v in zip(thresholds, values))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for t, v in zip(thresholds, values):
            body.append(f'<circle cx="{px(t):.1f}" cy="{py(v):.1f}" r="3" fill="{color}"/>')
        ly = top + 12 + 16 * n
        body.append(f'<rect x="{left + pw + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        body.append(f'<text x="{left + pw + 24}" y="{ly + 1}">{escape(str(name))}</text>')
    return _svg(width, height, body)


def confusion_svg(matrix, labels, title="Confusion matrix (rows: ground truth)", cell=36):
    """Heatmap with row-normalised shading and raw counts in each cell."""
    n = len(matrix)
    left, top = 90, 40
    width, height = left + n * cell + 20, top + n * cell + 70
    body = [f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{escape(title)}</text>']
    for i, row in enumerate(matrix):
        total = sum(row) or 1
        for j, v in enumerate(row):
            shade = int(255 - 200 * (v / total))
            x, y = left + j * cell, top + i * cell
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#fff"/>')
            ink = "#fff" if shade < 140 else "#000"
            body.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" fill="{ink}">{v:g}</text>')
    for i, name in enumerate(labels):
        body.append(f'<text x="{left - 6}" y="{top + i * cell + cell / 2 + 4}" text-anchor="end">{escape(str(name))}</text>')
        x = left + i * cell + cell / 2
        y = top + n * cell + 10
        body.append(f'<text x="{x}" y="{y}" text-anchor="end" transform="rotate(-45 {x} {y})">{escape(str(name))}</text>')
    return _svg(width, height, body)
