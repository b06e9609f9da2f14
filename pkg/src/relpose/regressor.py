"""Pose regression head, supervision losses and the assembled network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from relpose import autodiff as ad
from relpose.autodiff import Tensor
from relpose.autodiff.tensor import record_branch
from relpose.errors import NearZeroQuaternion, NonFiniteValue, ShapeMismatch
from relpose.features import ExtractorConfig, FeatureExtractor
from relpose.matching import aligned_concat, match_and_warp
from relpose.nn import Conv2d, Linear, Module

QUAT_EPS = 1e-12
DIRECTION_EPS = 1e-6
VARIANTS = ("full", "no_warp", "cnn_only", "self_attn_only")
_VARIANT_TAP = {"full": "final", "no_warp": "final", "cnn_only": "cnn_only", "self_attn_only": "after_first_self_attn"}


@dataclass(frozen=True)
class RegressorConfig:
    block_channels: int | None = None  # None keeps the input width (identity skip)
    hidden: int = 1024
    pooling: str = "avg"

    def __post_init__(self):
        if self.hidden <= 0 or (self.block_channels is not None and self.block_channels <= 0):
            raise ValueError("regressor widths must be positive")
        if self.pooling not in ("avg", "max"):
            raise ValueError(f"pooling must be 'avg' or 'max', got {self.pooling!r}")


@dataclass
class PosePrediction:
    q: Tensor  # (N, 4), not normalized
    t: Tensor  # (N, 3), meters


class PoseRegressor(Module):
    """Residual conv block -> global pooling -> MLP -> (q, t)."""

    def __init__(self, in_channels: int, cfg: RegressorConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        bc = cfg.block_channels or in_channels
        self.conv1 = Conv2d(rng, in_channels, bc, 3, padding=1, dtype=dtype)
        self.conv2 = Conv2d(rng, bc, bc, 3, padding=1, dtype=dtype)
        self.skip = Conv2d(rng, in_channels, bc, 1, gain=1.0, dtype=dtype) if bc != in_channels else None
        self.fc1 = Linear(rng, bc, cfg.hidden, gain=math.sqrt(2.0), dtype=dtype)
        self.fc2 = Linear(rng, cfg.hidden, 7, dtype=dtype)
        # start from the identity rotation
        self.fc2.bias.data[0] = 1.0

    def __call__(self, g) -> PosePrediction:
        g = ad.as_tensor(g)
        if not np.all(np.isfinite(g.data)):
            raise NonFiniteValue("regressor input is not finite")
        y = self.conv2(ad.relu(self.conv1(g)))
        skip = self.skip(g) if self.skip is not None else g
        y = ad.relu(ad.add(y, skip))
        n, c, h, w = y.shape
        flat = ad.reshape(y, (n, c, h * w))
        if self.cfg.pooling == "avg":
            pooled = ad.mean(flat, axis=2)
        else:
            arg = np.argmax(flat.data, axis=2)
            record_branch(arg)
            pooled = ad.reshape(ad.gather(flat, arg[..., None], axis=2), (n, c))
        out = self.fc2(ad.relu(self.fc1(pooled)))
        return PosePrediction(q=out[:, :4], t=out[:, 4:])


# losses ---------------------------------------------------------------------

def _row_norm(x: Tensor) -> Tensor:
    return ad.expand(ad.l2_norm(x, axis=1, keepdims=True), x.shape)


def _batch2(x, width):
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, width))
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeMismatch(f"expected (N, {width}), got {x.shape}")
    return x


def canonical_unit_quaternion(q_hat) -> Tensor:
    """q / |q| with the sign flipped where the first component is negative.
    The sign is a constant multiplier, so the gradient passes through."""
    q_hat = _batch2(q_hat, 4)
    norms = np.linalg.norm(q_hat.data, axis=1)
    if np.any(norms <= QUAT_EPS):
        raise NearZeroQuaternion(f"predicted quaternion norm {norms.min():g} <= {QUAT_EPS:g}")
    qn = ad.div(q_hat, _row_norm(q_hat))
    sign = np.where(qn.data[:, :1] < 0, -1.0, 1.0).astype(qn.dtype)
    record_branch(sign)
    return ad.mul(qn, Tensor(np.broadcast_to(sign, qn.shape).copy()))


def loss_rotation(q_hat, q) -> Tensor:
    """Per-sample L1 distance between the canonical unit prediction and the
    (canonical) target quaternion, shape (N,)."""
    q_hat = _batch2(q_hat, 4)
    q = np.asarray(q, dtype=q_hat.dtype).reshape(q_hat.shape)
    q = np.where(q[:, :1] < 0, -q, q)
    return ad.l1_norm(ad.sub(canonical_unit_quaternion(q_hat), Tensor(q)), axis=1)


def loss_translation(t_hat, t) -> Tensor:
    t_hat = _batch2(t_hat, 3)
    t = np.asarray(t, dtype=t_hat.dtype).reshape(t_hat.shape)
    return ad.l1_norm(ad.sub(t_hat, Tensor(t)), axis=1)


def loss_translation_normalized(t_hat, t) -> tuple[Tensor | None, np.ndarray]:
    """Per-sample L2 distance between unit directions.

    Returns ``(losses, valid)``: samples where either vector is shorter than
    1e-6 m are skipped; ``losses`` covers only the valid ones (None if none).
    """
    t_hat = _batch2(t_hat, 3)
    t = np.asarray(t, dtype=t_hat.dtype).reshape(t_hat.shape)
    valid = (np.linalg.norm(t_hat.data, axis=1) > DIRECTION_EPS) & (np.linalg.norm(t, axis=1) > DIRECTION_EPS)
    if not valid.any():
        return None, valid
    th = t_hat if valid.all() else t_hat[valid]
    tv = t[valid]
    target = tv / np.linalg.norm(tv, axis=1, keepdims=True)
    return ad.l2_norm(ad.sub(ad.div(th, _row_norm(th)), Tensor(target)), axis=1), valid


class LossWeights(Module):
    """Learned log-variance style weights, all starting at zero."""

    def __init__(self, dtype=np.float32):
        self.s_q = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.s_t = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.s_tn = Tensor(np.zeros((), dtype=dtype), requires_grad=True)

    def values(self) -> tuple[float, float, float]:
        return self.s_q.item(), self.s_t.item(), self.s_tn.item()


def loss_total(l_q, l_t, l_tn, weights: LossWeights) -> Tensor:
    """sum over terms of exp(-s) * L + s. ``l_tn`` may be None (all skipped)."""
    terms = []
    for comp, s in ((l_q, weights.s_q), (l_t, weights.s_t), (l_tn, weights.s_tn)):
        if comp is None:
            continue
        comp = ad.as_tensor(comp)
        terms.append(ad.add(ad.mul(ad.exp(ad.scalar_mul(s, -1.0)), comp), s))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


@dataclass
class LossBreakdown:
    total: Tensor
    rotation: float
    translation: float
    direction: float
    skipped: int = 0


def pose_loss(pred: PosePrediction, q, t, weights: LossWeights) -> LossBreakdown:
    """Batch-averaged components combined with the learned weights."""
    lq = ad.mean(loss_rotation(pred.q, q))
    lt = ad.mean(loss_translation(pred.t, t))
    ltn_all, valid = loss_translation_normalized(pred.t, t)
    ltn = ad.mean(ltn_all) if ltn_all is not None else None
    total = loss_total(lq, lt, ltn, weights)
    return LossBreakdown(
        total=total,
        rotation=lq.item(),
        translation=lt.item(),
        direction=ltn.item() if ltn is not None else float("nan"),
        skipped=int((~valid).sum()),
    )


# assembled network ----------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    variant: str = "full"
    temperature: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


class RelPoseNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.extractor = FeatureExtractor(cfg.extractor, seed=seed, dtype=dtype)
        self.regressor = PoseRegressor(2 * cfg.extractor.channels + 5, cfg.regressor, seed=seed + 1, dtype=dtype)
        self.loss = LossWeights(dtype=dtype)

    @property
    def dtype(self):
        return self.regressor.fc2.weight.dtype

    def correspondence_map(self, img_a, img_b) -> Tensor:
        fa, fb = self.extractor(img_a, img_b, tap=_VARIANT_TAP[self.cfg.variant])
        if self.cfg.variant == "no_warp":
            return aligned_concat(fa, fb)
        g, _ = match_and_warp(fa, fb, self.cfg.temperature)
        return g

    def __call__(self, img_a, img_b) -> PosePrediction:
        return self.regressor(self.correspondence_map(img_a, img_b))
