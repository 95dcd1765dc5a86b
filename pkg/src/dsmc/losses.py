"""Dual (degradation) subnet and the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import LRELU_SLOPE, Conv2d, Module
from .tensor import ShapeError, Tensor, leaky_relu, mean, sqrt, square

LOSS_KINDS = ("cb", "perc")


def _diag3(k):
    """Per-channel 3x3 kernel ``k`` as a 3->3 conv weight with no channel mixing."""
    w = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        w[c, c] = k
    return w


class DualSubnet(Module):
    """Learned degradation: a 3x3 blur conv, then a 3x3 stride-``scale`` conv
    whose bias plays the role of additive noise.

    The strided conv is unpadded, so LR pixel ``i`` reads HR rows
    ``scale*i - 1 .. scale*i + 3`` (after the blur), which is centred on the
    footprint the LR pixel was averaged from.  For scale 4 the two kernels
    start as factors of a 4x4 box average, ``[0, 1/2, 1/2]`` followed by
    ``[1/2, 0, 1/2]`` per axis, so the dual side agrees with area
    downsampling from the first iteration instead of fighting the primal loss.
    Other scales start from delta kernels (plain subsampling).
    """

    def __init__(self, scale=4, rng=None):
        self.scale = scale
        self.blur = Conv2d(3, 3, 3, stride=1, pad=1, bias=False, rng=rng)
        self.down = Conv2d(3, 3, 3, stride=scale, pad=0, bias=True, rng=rng)
        if scale == 4:
            b, d = np.array([0, 0.5, 0.5]), np.array([0.5, 0, 0.5])
        else:
            b = d = np.array([0, 1.0, 0])
        self.blur.weight.data[...] = _diag3(np.outer(b, b))
        self.down.weight.data[...] = _diag3(np.outer(d, d))
        self.down.bias.data[...] = 0.0

    def forward(self, sr):
        h, w = sr.shape[-2:]
        if h % self.scale or w % self.scale:
            raise ShapeError(f"dual subnet input {h}x{w} is not divisible by {self.scale}")
        return self.down(self.blur(sr))

    def macs(self, shape):
        m1, s = self.blur.macs(shape)
        m2, s = self.down.macs(s)
        return m1 + m2, s


class FeatureNet(Module):
    """Fixed, seeded conv stack standing in for a pretrained perceptual network."""

    def __init__(self, channels=(16, 32, 64), seed=1234):
        rng = np.random.default_rng(seed)
        layers, cin = [], 3
        for c in channels:
            conv = Conv2d(cin, c, 3, stride=2, pad=1, rng=rng)
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False
            layers.append(conv)
            cin = c
        self.layers = layers

    def forward(self, x):
        for conv in self.layers:
            x = leaky_relu(conv(x), LRELU_SLOPE)
        return x


def _check(pred, target, name):
    if pred.shape != target.shape:
        raise ShapeError(f"{name}: shape mismatch {pred.shape} vs {target.shape}")


def charbonnier(pred: Tensor, target, eps: float = 1e-3) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2))."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    _check(pred, target, "charbonnier")
    return mean(sqrt(square(pred - target) + eps * eps))


def perceptual(pred: Tensor, target, featnet: FeatureNet) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    _check(pred, target, "perceptual")
    return mean(square(featnet(pred) - featnet(target.detach())))


@dataclass
class LossWeights:
    primal: float = 1.0
    dual: float = 0.1
    perceptual: float = 0.1
    eps: float = 1e-3
    primal_terms: tuple = LOSS_KINDS
    dual_terms: tuple = LOSS_KINDS

    def __post_init__(self):
        for name in ("primal", "dual", "perceptual", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        self.primal_terms = tuple(self.primal_terms)
        self.dual_terms = tuple(self.dual_terms)
        for t in self.primal_terms + self.dual_terms:
            if t not in LOSS_KINDS:
                raise ValueError(f"unknown loss term {t!r}; expected one of {LOSS_KINDS}")
        if self.dual > 0 and set(self.primal_terms) != set(self.dual_terms):
            raise ValueError(
                f"dual training requires the same loss kinds on both sides, got primal "
                f"{self.primal_terms} and dual {self.dual_terms}")

    def active_terms(self, side: str) -> tuple:
        terms = self.primal_terms if side == "primal" else self.dual_terms
        if self.perceptual == 0:
            terms = tuple(t for t in terms if t != "perc")
        return terms


def _side(pred, target, weights, featnet, side):
    terms = weights.active_terms(side)
    cb = charbonnier(pred, target, weights.eps) if "cb" in terms else None
    perc = perceptual(pred, target, featnet) if "perc" in terms else None
    total = None
    if cb is not None:
        total = cb
    if perc is not None:
        total = perc * weights.perceptual if total is None else total + perc * weights.perceptual
    return total, cb, perc


def total_loss(sr, gt, lr, dual_out, weights: LossWeights, featnet: FeatureNet):
    """Weighted primal + dual objective.

    Returns the scalar loss tensor and a dict of float components:
    ``cb_primal``, ``perc_primal``, ``cb_dual``, ``perc_dual`` and ``total``.
    Batch reduction is a mean, so the weights do not couple to batch size.
    """
    p_total, p_cb, p_perc = _side(sr, gt, weights, featnet, "primal")
    loss = p_total * weights.primal
    d_cb = d_perc = None
    if weights.dual > 0 and dual_out is not None:
        d_total, d_cb, d_perc = _side(dual_out, lr, weights, featnet, "dual")
        loss = loss + d_total * weights.dual
    record = {
        "cb_primal": _f(p_cb), "perc_primal": _f(p_perc),
        "cb_dual": _f(d_cb), "perc_dual": _f(d_perc),
    }
    record["total"] = float(loss.data)
    return loss, record


def combine(record: dict, weights: LossWeights) -> float:
    """Recompute the total from a decomposition record."""
    return (weights.primal * (record["cb_primal"] + weights.perceptual * record["perc_primal"])
            + weights.dual * (record["cb_dual"] + weights.perceptual * record["perc_dual"]))


def _f(t):
    return 0.0 if t is None else float(t.data)
