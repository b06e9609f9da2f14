"""Coarse (1/8 resolution) feature extraction for an image pair.

Pipeline per image: three stride-2 conv stages and a 1x1 projection to
``C`` channels, a sinusoidal positional encoding added to the grid, then
``L`` attention layers alternating self-attention (each image attends to
itself) and cross-attention (each image attends to the other).

Both images share all weights and every layer updates the two grids from
the same inputs, so swapping the images swaps the outputs.

Attention is full softmax attention over the grid cells; the grids are
small enough that the quadratic cost does not matter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from relpose import autodiff as ad
from relpose.autodiff import Tensor
from relpose.errors import BadChannelCount, ShapeMismatch, TooSmall
from relpose.nn import Conv2d, LayerNorm, Linear, Module

TAPS = ("final", "after_first_self_attn", "cnn_only")


@dataclass(frozen=True)
class ExtractorConfig:
    channels: int = 64
    layers: int = 4
    heads: int = 4
    widths: tuple[int, int, int] = (16, 32, 64)
    in_channels: int = 1

    def __post_init__(self):
        if self.channels <= 0 or self.channels % self.heads:
            raise BadChannelCount(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.channels % 4:
            raise BadChannelCount(f"channels={self.channels} must be divisible by 4 for positional encoding")
        if self.layers < 0 or self.layers % 2:
            raise ValueError(f"layers={self.layers} must be even (self/cross pairs)")
        if len(self.widths) != 3 or min(self.widths) <= 0:
            raise ValueError(f"widths must be three positive ints, got {self.widths}")

    @classmethod
    def full_scale(cls) -> "ExtractorConfig":
        return cls(channels=256, layers=8, heads=8, widths=(128, 196, 256), in_channels=1)


@dataclass
class FeatureGrid:
    """Per-image feature map of shape (C, h, w), or (N, C, h, w) for a batch."""

    features: Tensor

    @property
    def channels(self) -> int:
        return self.features.shape[-3]

    @property
    def height(self) -> int:
        return self.features.shape[-2]

    @property
    def width(self) -> int:
        return self.features.shape[-1]

    @property
    def n(self) -> int:
        return self.height * self.width

    def flat(self) -> np.ndarray:
        """(n, C) view, cell index ``i = row * w + col``."""
        f = self.features.data
        return f.reshape(*f.shape[:-2], -1).swapaxes(-1, -2)


def grid_size(height: int, width: int) -> tuple[int, int]:
    return height // 8, width // 8


def positional_encoding(h: int, w: int, channels: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal 2-D encoding of shape (C, h, w).

    Channel quarters hold sin(x*f_k), cos(x*f_k), sin(y*f_k), cos(y*f_k) for
    x = column, y = row and frequencies f_k = 10000 ** (-4k / C).
    """
    if channels <= 0 or channels % 4:
        raise BadChannelCount(f"positional encoding needs C divisible by 4, got {channels}")
    q = channels // 4
    freqs = 10000.0 ** (-4.0 * np.arange(q) / channels)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ax = freqs[:, None, None] * xs
    ay = freqs[:, None, None] * ys
    return np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=0).astype(dtype)


class AttentionLayer(Module):
    """Multi-head attention with residual + layer norm, then a feed-forward
    block with residual + layer norm (post-norm)."""

    def __init__(self, rng, channels: int, heads: int, dtype=np.float32):
        self.heads = heads
        self.q = Linear(rng, channels, channels, dtype=dtype)
        self.k = Linear(rng, channels, channels, dtype=dtype)
        self.v = Linear(rng, channels, channels, dtype=dtype)
        self.out = Linear(rng, channels, channels, dtype=dtype)
        self.norm1 = LayerNorm(channels, dtype=dtype)
        self.ff1 = Linear(rng, channels, 2 * channels, gain=math.sqrt(2.0), dtype=dtype)
        self.ff2 = Linear(rng, 2 * channels, channels, dtype=dtype)
        self.norm2 = LayerNorm(channels, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        d = c // self.heads
        x = ad.reshape(x, (b, n, self.heads, d))
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b * self.heads, n, d))

    def message(self, x: Tensor, source: Tensor, return_weights: bool = False):
        """Attention output (before residual) of queries ``x`` (B, n, C) over
        keys/values from ``source`` (B, m, C)."""
        if x.ndim != 3 or source.ndim != 3 or x.shape[0] != source.shape[0] or x.shape[2] != source.shape[2]:
            raise ShapeMismatch(f"attention: queries {x.shape} vs source {source.shape}")
        b, n, c = x.shape
        d = c // self.heads
        q = self._split(self.q(x))
        k = self._split(self.k(source))
        v = self._split(self.v(source))
        scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
        weights = ad.softmax(scores, axis=-1)
        msg = ad.matmul(weights, v)
        msg = ad.reshape(ad.transpose(ad.reshape(msg, (b, self.heads, n, d)), (0, 2, 1, 3)), (b, n, c))
        msg = self.out(msg)
        if return_weights:
            return msg, weights.data.reshape(b, self.heads, n, source.shape[1])
        return msg

    def __call__(self, x: Tensor, source: Tensor) -> Tensor:
        h = self.norm1(ad.add(x, self.message(x, source)))
        return self.norm2(ad.add(h, self.ff2(ad.relu(self.ff1(h)))))


def _tokens(grid: Tensor) -> Tensor:
    n, c, h, w = grid.shape
    return ad.transpose(ad.reshape(grid, (n, c, h * w)), (0, 2, 1))


def _grid(tokens: Tensor, h: int, w: int) -> Tensor:
    n, _, c = tokens.shape
    return ad.reshape(ad.transpose(tokens, (0, 2, 1)), (n, c, h, w))


class FeatureExtractor(Module):
    def __init__(self, cfg: ExtractorConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        w1, w2, w3 = cfg.widths
        # k=4, s=2, p=1 halves with flooring: 341 -> 170 -> 85 -> 42
        self.stage1 = Conv2d(rng, cfg.in_channels, w1, 4, stride=2, padding=1, dtype=dtype)
        self.stage2 = Conv2d(rng, w1, w2, 4, stride=2, padding=1, dtype=dtype)
        self.stage3 = Conv2d(rng, w2, w3, 4, stride=2, padding=1, dtype=dtype)
        self.project = Conv2d(rng, w3, cfg.channels, 1, gain=1.0, dtype=dtype)
        self.attention = [AttentionLayer(rng, cfg.channels, cfg.heads, dtype=dtype) for _ in range(cfg.layers)]

    def cnn(self, images: Tensor) -> Tensor:
        x = ad.relu(self.stage1(images))
        x = ad.relu(self.stage2(x))
        x = ad.relu(self.stage3(x))
        return self.project(x)

    def __call__(self, img_a, img_b, tap: str = "final") -> tuple[Tensor, Tensor]:
        """Batched extraction; images are (N, Cin, H, W). Returns two
        (N, C, H//8, W//8) tensors."""
        if tap not in TAPS:
            raise ValueError(f"unknown tap {tap!r}; expected one of {TAPS}")
        img_a, img_b = ad.as_tensor(img_a), ad.as_tensor(img_b)
        if img_a.shape != img_b.shape:
            raise ShapeMismatch(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
        if img_a.ndim != 4 or img_a.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"expected (N, {self.cfg.in_channels}, H, W) images, got {img_a.shape}")
        height, width = img_a.shape[2:]
        if height < 8 or width < 8:
            raise TooSmall(f"images must be at least 8x8, got {height}x{width}")
        n = img_a.shape[0]

        both = self.cnn(ad.concat([img_a, img_b], axis=0))
        if tap == "cnn_only":
            return both[:n], both[n:]

        _, c, h, w = both.shape
        pe = positional_encoding(h, w, c, dtype=both.dtype)
        both = ad.add(both, Tensor(np.broadcast_to(pe, both.shape).copy()))
        tokens = _tokens(both)
        for i, layer in enumerate(self.attention):
            if i % 2 == 0:
                tokens = layer(tokens, tokens)
            else:
                swapped = ad.concat([tokens[n:], tokens[:n]], axis=0)
                tokens = layer(tokens, swapped)
            if tap == "after_first_self_attn":
                break
        both = _grid(tokens, h, w)
        return both[:n], both[n:]


def _as_batch(img) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    return arr[None]


def extract_pair(img_a, img_b, extractor: FeatureExtractor, tap: str = "final") -> tuple[FeatureGrid, FeatureGrid]:
    """Single-pair convenience wrapper: images are (H, W) or (Cin, H, W)."""
    a, b = _as_batch(img_a), _as_batch(img_b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    fa, fb = extractor(a.astype(extractor.project.weight.dtype), b.astype(extractor.project.weight.dtype), tap=tap)
    return FeatureGrid(fa[0]), FeatureGrid(fb[0])
