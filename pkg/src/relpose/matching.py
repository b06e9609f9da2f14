"""Hard correlation matching and construction of the warped correspondence map.

For each cell i of image A the match is the cell j of image B with the
largest dot product F_A(i) . F_B(j); the confidence is the row softmax of
the correlation matrix taken at that j. The warped map stacks, per cell of
A: its own feature, its normalized (x, y), the matched B feature, the
matched (x, y) and the confidence, 2C + 5 channels in all.

The argmax is an index choice and carries no gradient. Gradients reach
F_A directly, F_B through the gathered rows, and both through the
confidence softmax.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from relpose import autodiff as ad
from relpose.autodiff import Tensor
from relpose.autodiff.tensor import record_branch
from relpose.errors import IndexOutOfRange, NonFiniteValue, ShapeMismatch


@dataclass
class CorrespondenceMap:
    """Batched matches: ``index`` and ``confidence`` are (N, n)."""

    index: np.ndarray
    confidence: Tensor
    height: int
    width: int

    @property
    def n(self) -> int:
        return self.height * self.width


def _batched(f) -> Tensor:
    f = ad.as_tensor(f.features if hasattr(f, "features") else f)
    if f.ndim == 3:
        f = ad.reshape(f, (1, *f.shape))
    if f.ndim != 4:
        raise ShapeMismatch(f"expected (N, C, h, w) features, got {f.shape}")
    return f


def flatten_cells(f) -> Tensor:
    """(N, C, h, w) -> (N, n, C) with cell index ``row * w + col``."""
    f = _batched(f)
    n, c, h, w = f.shape
    return ad.transpose(ad.reshape(f, (n, c, h * w)), (0, 2, 1))


def cell_coordinates(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """(n, 2) array of (col / (w-1), row / (h-1)); a length-1 axis maps to 0."""
    rows, cols = np.divmod(np.arange(h * w), w)
    x = cols / (w - 1) if w > 1 else np.zeros(h * w)
    y = rows / (h - 1) if h > 1 else np.zeros(h * w)
    return np.stack([x, y], axis=1).astype(dtype)


def correlate(fa, fb) -> Tensor:
    """Raw dot-product correlation, (N, n, n); entry (i, j) = F_A(i) . F_B(j)."""
    fa, fb = _batched(fa), _batched(fb)
    if fa.shape != fb.shape:
        raise ShapeMismatch(f"correlate: feature grids {fa.shape} vs {fb.shape}")
    ta, tb = flatten_cells(fa), flatten_cells(fb)
    return ad.matmul(ta, ad.transpose(tb, (0, 2, 1)))


def match(corr, height: int, width: int, temperature: float = 1.0) -> CorrespondenceMap:
    corr = ad.as_tensor(corr)
    if corr.ndim == 2:
        corr = ad.reshape(corr, (1, *corr.shape))
    if corr.ndim != 3 or corr.shape[1] != height * width:
        raise ShapeMismatch(f"match: correlation {corr.shape} for a {height}x{width} grid")
    if not np.all(np.isfinite(corr.data)):
        raise NonFiniteValue("match: correlation has non-finite entries")
    index = np.argmax(corr.data, axis=-1)  # first maximum -> lowest index on ties
    record_branch(index)
    probs = ad.softmax(ad.scalar_mul(corr, 1.0 / temperature), axis=-1)
    conf = ad.reshape(ad.gather(probs, index[..., None], axis=-1), index.shape)
    return CorrespondenceMap(index, conf, height, width)


def warp(fa, fb, cmap: CorrespondenceMap) -> Tensor:
    """Build the (N, 2C+5, h, w) warped correspondence map."""
    fa, fb = _batched(fa), _batched(fb)
    n, c, h, w = fa.shape
    if fb.shape != fa.shape or cmap.index.shape != (n, h * w):
        raise ShapeMismatch(f"warp: features {fa.shape}/{fb.shape}, matches {cmap.index.shape}")
    if cmap.index.min() < 0 or cmap.index.max() >= h * w:
        raise IndexOutOfRange(f"warp: match index outside [0, {h * w})")
    ta, tb = flatten_cells(fa), flatten_cells(fb)
    tb_matched = ad.gather(tb, np.repeat(cmap.index[..., None], c, axis=-1), axis=1)
    coords = cell_coordinates(h, w, dtype=fa.dtype)
    xa = Tensor(np.broadcast_to(coords, (n, h * w, 2)).copy())
    xb = Tensor(coords[cmap.index])
    conf = ad.reshape(cmap.confidence, (n, h * w, 1))
    g = ad.concat([ta, xa, tb_matched, xb, conf], axis=-1)
    return ad.reshape(ad.transpose(g, (0, 2, 1)), (n, 2 * c + 5, h, w))


def match_and_warp(fa, fb, temperature: float = 1.0) -> tuple[Tensor, CorrespondenceMap]:
    fa, fb = _batched(fa), _batched(fb)
    cmap = match(correlate(fa, fb), fa.shape[2], fa.shape[3], temperature)
    return warp(fa, fb, cmap), cmap


def aligned_concat(fa, fb) -> Tensor:
    """No-matching stand-in for :func:`warp`: pairs each cell with the same
    cell of B, repeats the coordinates and fixes confidence to 1. Keeps the
    2C + 5 channel layout so the regressor is unchanged."""
    fa, fb = _batched(fa), _batched(fb)
    if fa.shape != fb.shape:
        raise ShapeMismatch(f"aligned_concat: {fa.shape} vs {fb.shape}")
    n, c, h, w = fa.shape
    coords = Tensor(np.broadcast_to(cell_coordinates(h, w, dtype=fa.dtype), (n, h * w, 2)).copy())
    ones = Tensor(np.ones((n, h * w, 1), dtype=fa.dtype))
    g = ad.concat([flatten_cells(fa), coords, flatten_cells(fb), coords, ones], axis=-1)
    return ad.reshape(ad.transpose(g, (0, 2, 1)), (n, 2 * c + 5, h, w))


def dump_correspondences(path, cmap: CorrespondenceMap, batch_index: int = 0) -> None:
    """CSV with columns i, row, col, match_row, match_col, confidence."""
    w = cmap.width
    idx = cmap.index[batch_index]
    conf = cmap.confidence.data[batch_index]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["i", "row", "col", "match_row", "match_col", "confidence"])
        for i, (j, p) in enumerate(zip(idx, conf)):
            writer.writerow([i, i // w, i % w, int(j) // w, int(j) % w, repr(float(p))])
