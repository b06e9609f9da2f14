"""Error distributions: unnormalized CDFs, histograms, CSV and SVG output."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from relpose.errors import EmptyInput, ParseError


def unnormalized_cdf(errors: Sequence[float], cutoff: float | None = None) -> list[tuple[float, int]]:
    """(value, number of errors <= value) at every distinct error value,
    optionally keeping only values <= ``cutoff``."""
    if len(errors) == 0:
        raise EmptyInput("no errors to summarize")
    values, counts = np.unique(np.asarray(errors, dtype=np.float64), return_counts=True)
    cumulative = np.cumsum(counts)
    points = [(float(v), int(c)) for v, c in zip(values, cumulative)]
    if cutoff is not None:
        points = [p for p in points if p[0] <= cutoff]
    return points


def histogram(errors: Sequence[float], bin_width: float, cutoff: float | None = None) -> list[tuple[float, float, int]]:
    """Counts in [k*w, (k+1)*w); the last bin is closed so the max lands in it.
    Errors above ``cutoff`` are dropped."""
    if len(errors) == 0:
        raise EmptyInput("no errors to summarize")
    if not bin_width > 0:
        raise ValueError("bin width must be positive")
    e = np.asarray(errors, dtype=np.float64)
    if cutoff is not None:
        e = e[e <= cutoff]
    top = cutoff if cutoff is not None else (float(e.max()) if e.size else bin_width)
    n_bins = max(1, int(math.ceil(top / bin_width - 1e-12)))
    counts = np.zeros(n_bins, dtype=np.int64)
    if e.size:
        idx = np.minimum((e // bin_width).astype(np.int64), n_bins - 1)
        np.add.at(counts, idx, 1)
    return [(k * bin_width, (k + 1) * bin_width, int(c)) for k, c in enumerate(counts)]


def write_cdf_csv(path, points) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["error", "count"])
        for v, c in points:
            w.writerow([repr(v), c])


def write_histogram_csv(path, bins) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in bins:
            w.writerow([repr(lo), repr(hi), c])


# SVG ---------------------------------------------------------------------

_W, _H, _PAD = 480, 320, 48


def _frame(title: str, xlabel: str, ylabel: str, xmax: float, ymax: float) -> list[str]:
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - _PAD / 2, _PAD / 2
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="16" text-anchor="middle" font-size="13" font-family="sans-serif">{title}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2:.1f}" y="{_H - 10}" text-anchor="middle" font-size="11" '
        f'font-family="sans-serif">{xlabel}</text>',
        f'<text x="12" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="11" font-family="sans-serif" '
        f'transform="rotate(-90 12 {(y0 + y1) / 2:.1f})">{ylabel}</text>',
    ]
    for k in range(5):
        fx, fy = k / 4, k / 4
        px = x0 + fx * (x1 - x0)
        py = y0 - fy * (y0 - y1)
        out.append(f'<text x="{px:.1f}" y="{y0 + 14}" text-anchor="middle" font-size="9" '
                   f'font-family="sans-serif">{fx * xmax:.3g}</text>')
        out.append(f'<text x="{x0 - 4}" y="{py + 3:.1f}" text-anchor="end" font-size="9" '
                   f'font-family="sans-serif">{fy * ymax:.3g}</text>')
    return out


def _to_px(x, y, xmax, ymax):
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - _PAD / 2, _PAD / 2
    return x0 + (x / xmax) * (x1 - x0), y0 - (y / ymax) * (y0 - y1)


def cdf_svg(points, title: str, xlabel: str, xmax: float | None = None) -> str:
    xmax = xmax or max(points[-1][0], 1e-12)
    ymax = max(points[-1][1], 1)
    parts = _frame(title, xlabel, "count", xmax, ymax)
    coords = [_to_px(0.0, 0, xmax, ymax)]
    prev = 0
    for v, c in points:
        coords.append(_to_px(v, prev, xmax, ymax))
        coords.append(_to_px(v, c, xmax, ymax))
        prev = c
    coords.append(_to_px(xmax, prev, xmax, ymax))
    poly = " ".join(f"{x:.2f},{y:.2f}" for x, y in coords)
    parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{poly}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def histogram_svg(bins, title: str, xlabel: str) -> str:
    xmax = bins[-1][1]
    ymax = max(max(c for _, _, c in bins), 1)
    parts = _frame(title, xlabel, "count", xmax, ymax)
    for lo, hi, c in bins:
        (xa, ya), (xb, yb) = _to_px(lo, c, xmax, ymax), _to_px(hi, 0, xmax, ymax)
        parts.append(f'<rect x="{xa:.2f}" y="{ya:.2f}" width="{max(xb - xa - 1, 0.5):.2f}" '
                     f'height="{yb - ya:.2f}" fill="steelblue"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_distribution(out_dir, name: str, errors, unit: str, bin_width: float, cutoff: float | None = None) -> dict:
    """Write ``cdf_<name>.csv/.svg`` and ``hist_<name>.csv/.svg``; returns a
    small summary (pair count, fraction kept below the cutoff)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = unnormalized_cdf(errors, cutoff)
    bins = histogram(errors, bin_width, cutoff)
    write_cdf_csv(out / f"cdf_{name}.csv", points)
    write_histogram_csv(out / f"hist_{name}.csv", bins)
    kept = points[-1][1] if points else 0
    (out / f"cdf_{name}.svg").write_text(
        cdf_svg(points or [(0.0, 0)], f"{name} error: empirical (unnormalized) CDF", unit, xmax=cutoff))
    (out / f"hist_{name}.svg").write_text(histogram_svg(bins, f"{name} error histogram", unit))
    return {"pairs": len(errors), "kept": kept, "fraction_kept": kept / len(errors)}


def read_error_csv(path) -> tuple[list[float], list[float]]:
    """Read rotation/translation columns from a per-pair error CSV."""
    rot, trans = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"rotation_deg", "translation_m"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ParseError(f"{path}: expected columns {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rot.append(float(row["rotation_deg"]))
                trans.append(float(row["translation_m"]))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    if not rot:
        raise EmptyInput(f"{path} has no error rows")
    return rot, trans
