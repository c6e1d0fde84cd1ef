"""Dependency-free SVG output: bar charts, annotated grid heatmaps, scatter
plots. Text output keeps artifacts diffable."""

from __future__ import annotations

import math

_FONT = "font-family='Helvetica,Arial,sans-serif'"


def _esc(text) -> str:
    return (
        str(text)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _header(width, height, title):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-size="16" {_FONT}>'
        f"{_esc(title)}</text>",
    ]
    return parts


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if math.isinf(v):
        return "inf"
    if abs(v) >= 1000 or abs(v) < 0.01:
        return f"{v:.2e}"
    return f"{v:.3g}"


def bar_chart(path, labels, values, title, y_label=""):
    """Vertical bars with value annotations; infinite values are capped and
    marked."""
    width, height = 80 + 90 * len(labels), 360
    left, bottom, top = 70, height - 70, 50
    finite = [v for v in values if not math.isinf(v)] or [1.0]
    v_max = max(max(finite), 1e-12) * 1.15
    parts = _header(width, height, title)
    parts.append(
        f'<line x1="{left}" y1="{bottom}" x2="{width - 20}" y2="{bottom}" stroke="black"/>'
    )
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>')
    for i in range(5):
        v = v_max * i / 4
        y = bottom - (bottom - top) * i / 4
        parts.append(
            f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11" {_FONT}>{_fmt(v)}</text>'
        )
        parts.append(
            f'<line x1="{left}" y1="{y:.1f}" x2="{width - 20}" y2="{y:.1f}" stroke="#dddddd"/>'
        )
    if y_label:
        parts.append(
            f'<text x="16" y="{(top + bottom) / 2:.0f}" font-size="12" {_FONT} '
            f'transform="rotate(-90 16 {(top + bottom) / 2:.0f})" text-anchor="middle">{_esc(y_label)}</text>'
        )
    bw = 56
    for i, (label, v) in enumerate(zip(labels, values)):
        x = left + 20 + i * 90
        capped = min(v, v_max) if not math.isinf(v) else v_max
        bh = (bottom - top) * capped / v_max
        parts.append(
            f'<rect x="{x}" y="{bottom - bh:.1f}" width="{bw}" height="{bh:.1f}" fill="#4878a8"/>'
        )
        parts.append(
            f'<text x="{x + bw / 2}" y="{bottom - bh - 6:.1f}" text-anchor="middle" '
            f'font-size="11" {_FONT}>{_fmt(v)}</text>'
        )
        parts.append(
            f'<text x="{x + bw / 2}" y="{bottom + 18}" text-anchor="middle" font-size="12" {_FONT}>'
            f"{_esc(label)}</text>"
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def _heat_color(u: float) -> str:
    # white -> blue ramp
    r = int(255 - 180 * u)
    g = int(255 - 140 * u)
    b = 255
    return f"rgb({r},{g},{b})"


def heatmap(path, row_labels, col_labels, values, title, empty_cells=frozenset()):
    """values[i][j] or None; None and empty cells render blank."""
    cell, label_w, label_h = 78, 120, 60
    width = label_w + cell * len(col_labels) + 30
    height = label_h + cell * len(row_labels) + 60
    flat = [v for row in values for v in row if v is not None]
    lo = min(flat) if flat else 0.0
    hi = max(flat) if flat else 1.0
    span = hi - lo if hi > lo else 1.0
    parts = _header(width, height, title)
    for j, cl in enumerate(col_labels):
        x = label_w + j * cell + cell / 2
        parts.append(
            f'<text x="{x}" y="{label_h - 10}" text-anchor="middle" font-size="11" {_FONT}>{_esc(cl)}</text>'
        )
    for i, rl in enumerate(row_labels):
        y = label_h + i * cell + cell / 2
        parts.append(
            f'<text x="{label_w - 8}" y="{y + 4}" text-anchor="end" font-size="11" {_FONT}>{_esc(rl)}</text>'
        )
        for j in range(len(col_labels)):
            x = label_w + j * cell
            v = values[i][j]
            if v is None or (i, j) in empty_cells:
                parts.append(
                    f'<rect x="{x}" y="{label_h + i * cell}" width="{cell - 2}" height="{cell - 2}" '
                    f'fill="#f4f4f4" stroke="#cccccc"/>'
                )
                continue
            u = (v - lo) / span
            parts.append(
                f'<rect x="{x}" y="{label_h + i * cell}" width="{cell - 2}" height="{cell - 2}" '
                f'fill="{_heat_color(u)}" stroke="#888888"/>'
            )
            parts.append(
                f'<text x="{x + (cell - 2) / 2}" y="{label_h + i * cell + cell / 2 + 4}" '
                f'text-anchor="middle" font-size="11" {_FONT}>{_fmt(v)}</text>'
            )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def scatter(path, xs, ys, labels, title, x_label, y_label, diagonal=True):
    """Scatter with optional y = x guide (for paired method comparisons)."""
    width, height = 460, 460
    left, right, top, bottom = 70, width - 30, 50, height - 60
    all_v = list(xs) + list(ys) or [0.0, 1.0]
    lo, hi = min(all_v), max(all_v)
    pad = (hi - lo) * 0.1 or 0.1
    lo, hi = lo - pad, hi + pad

    def sx(v):
        return left + (right - left) * (v - lo) / (hi - lo)

    def sy(v):
        return bottom - (bottom - top) * (v - lo) / (hi - lo)

    parts = _header(width, height, title)
    parts.append(f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>')
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        parts.append(
            f'<text x="{sx(v):.1f}" y="{bottom + 16}" text-anchor="middle" font-size="10" {_FONT}>{_fmt(v)}</text>'
        )
        parts.append(
            f'<text x="{left - 6}" y="{sy(v) + 3:.1f}" text-anchor="end" font-size="10" {_FONT}>{_fmt(v)}</text>'
        )
    parts.append(
        f'<text x="{(left + right) / 2}" y="{height - 16}" text-anchor="middle" font-size="12" {_FONT}>'
        f"{_esc(x_label)}</text>"
    )
    parts.append(
        f'<text x="18" y="{(top + bottom) / 2}" font-size="12" {_FONT} text-anchor="middle" '
        f'transform="rotate(-90 18 {(top + bottom) / 2})">{_esc(y_label)}</text>'
    )
    if diagonal:
        parts.append(
            f'<line x1="{sx(lo):.1f}" y1="{sy(lo):.1f}" x2="{sx(hi):.1f}" y2="{sy(hi):.1f}" '
            f'stroke="#aaaaaa" stroke-dasharray="4 3"/>'
        )
    for x, y, label in zip(xs, ys, labels):
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" fill="#c0392b"/>')
        if label:
            parts.append(
                f'<text x="{sx(x) + 6:.1f}" y="{sy(y) - 6:.1f}" font-size="9" {_FONT}>{_esc(label)}</text>'
            )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
