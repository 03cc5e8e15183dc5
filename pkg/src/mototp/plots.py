"""Dependency-free SVG line charts for ROC and reliability curves."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#c0392b", "#e67e22", "#2980b9", "#27ae60", "#8e44ad")
W, H, PAD = 360, 360, 48


def _xy(x: float, y: float) -> tuple[float, float]:
    return PAD + x * (W - 2 * PAD), H - PAD - y * (H - 2 * PAD)


def _polyline(xs, ys, color: str, dashed: bool = False) -> str:
    pts = " ".join("{:.2f},{:.2f}".format(*_xy(float(x), float(y))) for x, y in zip(xs, ys))
    dash = ' stroke-dasharray="4 3"' if dashed else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>'


def line_chart(series, title: str, xlabel: str, ylabel: str, diagonal: bool = True) -> str:
    """``series`` is a list of (label, xs, ys) on the unit square."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    x0, y0 = _xy(0, 0)
    x1, y1 = _xy(1, 1)
    parts.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="#444"/>')
    for t in np.linspace(0, 1, 6):
        tx, _ = _xy(t, 0)
        _, ty = _xy(0, t)
        parts.append(f'<text x="{tx:.1f}" y="{y0 + 14}" text-anchor="middle" font-size="9">{t:.1f}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{ty + 3:.1f}" text-anchor="end" font-size="9">{t:.1f}</text>')
    parts.append(f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>')
    parts.append(
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>'
    )
    if diagonal:
        parts.append(_polyline([0, 1], [0, 1], "#999", dashed=True))
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        parts.append(_polyline(xs, ys, color))
        lx, ly = x0 + 8, y1 + 14 + 14 * i
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 16}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 20}" y="{ly}" font-size="10">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def roc_svg(scores, labels, names) -> str:
    from .metrics import binary_auc, roc_curve

    scores = np.asarray(scores)
    labels = np.asarray(labels)
    series = []
    for k, name in enumerate(names):
        pos = labels == k
        if pos.all() or not pos.any():
            continue
        fpr, tpr = roc_curve(scores[:, k], pos)
        series.append((f"{name} (AUC {binary_auc(scores[:, k], pos):.3f})", fpr, tpr))
    return line_chart(series, "ROC (one-vs-rest)", "false positive rate", "true positive rate")


def calibration_svg(curve, names) -> str:
    series = []
    for name, rows in zip(names, curve.per_class):
        if rows:
            series.append((name, [r[2] for r in rows], [r[3] for r in rows]))
    return line_chart(series, f"Reliability (ECE {curve.ece:.3f})", "mean predicted probability", "observed frequency")


def write_svg(path, svg: str) -> None:
    Path(path).write_text(svg, encoding="utf-8")
