"""Multi-stage communicated upsampling.

The total scale is split into prime factors.  Stage ``s`` takes the residual
features ``R^{s-1}`` at the previous scale and produces

    I^s = bicubic(center_lr -> scale_s) + reduce(subpixel(R^{s-1}))
    r^s = correct(bicubic(R^{s-1}))
    F^s = visualize(I^s)
    R^s = fuse([r^s, F^s])

The last stage only needs ``I^s``, which is the super-resolved frame.  With
every learnable weight at zero the output is exactly the bicubic upscale of
the center frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import functional as F
from .nn import LRELU_SLOPE, Conv2d, Module, ResBlock, SubPixelConv2d
from .tensor import Tensor, concat, leaky_relu


def is_prime(n: int) -> bool:
    return n >= 2 and all(n % d for d in range(2, int(n ** 0.5) + 1))


def prime_factors(n: int) -> tuple:
    out, d = [], 2
    while n > 1:
        while n % d == 0:
            out.append(d)
            n //= d
        d += 1
    return tuple(out)


@dataclass
class MSCUConfig:
    in_channels: int = 320
    channels: int = 64
    factors: tuple = (2, 2)
    resnet_depth: int = 3
    communication: bool = True
    correction: bool = True
    scale: Optional[int] = None

    def __post_init__(self):
        self.factors = tuple(int(f) for f in self.factors)
        if not self.factors:
            raise ValueError("MSCU needs at least one stage factor")
        bad = [f for f in self.factors if not is_prime(f)]
        if bad:
            raise ValueError(f"MSCU stage factors must be prime, got {bad}")
        total = 1
        for f in self.factors:
            total *= f
        if self.scale is not None and total != self.scale:
            raise ValueError(f"stage factors {self.factors} multiply to {total}, not the requested scale {self.scale}")
        self.scale = total

    @property
    def n_stages(self) -> int:
        return len(self.factors)


@dataclass
class MSCUState:
    stage: int
    residual: Tensor
    image: Optional[Tensor] = None
    virtual: Optional[Tensor] = None
    history: list = field(default_factory=list)


class Correction(Module):
    """Feature correction: entry conv to the working width plus a residual stack."""

    def __init__(self, cin, c, depth, rng=None):
        self.entry = Conv2d(cin, c, 3, rng=rng)
        self.blocks = [ResBlock(c, rng=rng) for _ in range(depth)]

    def forward(self, x):
        x = leaky_relu(self.entry(x), LRELU_SLOPE)
        for b in self.blocks:
            x = b(x)
        return x

    def macs(self, shape):
        total, s = self.entry.macs(shape)
        for b in self.blocks:
            m, s = b.macs(s)
            total += m
        return total, s


class MSCUStage(Module):
    def __init__(self, cfg: MSCUConfig, index: int, cin: int, rng=None):
        self.index = index
        self.factor = cfg.factors[index]
        self.last = index == cfg.n_stages - 1
        self.communication = cfg.communication
        c = cfg.channels
        self.upsample = SubPixelConv2d(cin, c, self.factor, k=3, rng=rng)
        if self.last or cfg.communication:
            self.reduce = Conv2d(c, 3, 1, rng=rng, zero_init=True)
        if self.last:
            return
        if not cfg.communication:
            if cfg.correction:
                self.correct = Correction(c, c, cfg.resnet_depth, rng=rng)
            return
        corrected = cin
        if cfg.correction:
            self.correct = Correction(cin, c, cfg.resnet_depth, rng=rng)
            corrected = c
        self.visualize = Conv2d(3, c, 1, rng=rng)
        self.fuse = Conv2d(corrected + c, c, 1, rng=rng)

    def forward(self, state: MSCUState, center_up: Tensor) -> MSCUState:
        r_prev = state.residual
        image = center_up + self.reduce(self.upsample(r_prev))
        if self.last:
            return MSCUState(self.index + 1, r_prev, image, None, state.history + [image])
        feats = F.bicubic_resize(r_prev, self.factor, antialias=False)
        if hasattr(self, "correct"):
            feats = self.correct(feats)
        virtual = self.visualize(image)
        residual = self.fuse(concat([feats, virtual], axis=1))
        return MSCUState(self.index + 1, residual, image, virtual, state.history + [image])

    def forward_plain(self, feats: Tensor) -> Tensor:
        """Communication ablation: upsample features only, no intermediate image."""
        feats = self.upsample(feats)
        if self.last:
            return self.reduce(feats)
        feats = leaky_relu(feats, LRELU_SLOPE)
        if hasattr(self, "correct"):
            feats = self.correct(feats)
        return feats

    def macs(self, shape):
        n = shape[0]
        total, up = self.upsample.macs(shape)
        if hasattr(self, "reduce"):
            total += self.reduce.macs(up)[0]
        if self.last:
            return total, (n, 3, up[2], up[3])
        if not self.communication:
            if hasattr(self, "correct"):
                m, up = self.correct.macs(up)
                total += m
            return total, up
        feats = (n, shape[1], up[2], up[3])
        if hasattr(self, "correct"):
            m, feats = self.correct.macs(feats)
            total += m
        total += self.visualize.macs((n, 3, up[2], up[3]))[0]
        m, out = self.fuse.macs((n, feats[1] + self.visualize.weight.shape[0], up[2], up[3]))
        return total + m, out


class MSCU(Module):
    def __init__(self, cfg: MSCUConfig, rng=None):
        self.cfg = cfg
        stages, cin = [], cfg.in_channels
        for i in range(cfg.n_stages):
            stages.append(MSCUStage(cfg, i, cin, rng=rng))
            cin = cfg.channels
        self.stages = stages

    def initial_state(self, features: Tensor, center_lr: Tensor) -> MSCUState:
        return MSCUState(0, features, center_lr, None, [])

    def stage(self, state: MSCUState, center_up: Tensor) -> MSCUState:
        if state.stage >= self.cfg.n_stages:
            raise IndexError(f"stage {state.stage + 1} requested but only {self.cfg.n_stages} stages exist")
        return self.stages[state.stage](state, center_up)

    def forward(self, features: Tensor, center_lr: Tensor, return_state: bool = False):
        if not self.cfg.communication:
            x = features
            for s in self.stages:
                x = s.forward_plain(x)
            return (x, None) if return_state else x
        state = self.initial_state(features, center_lr)
        scale = 1
        for f in self.cfg.factors:
            scale *= f
            center_up = F.bicubic_resize(center_lr, scale, antialias=False)
            state = self.stage(state, center_up)
        return (state.image, state) if return_state else state.image

    def macs(self, shape):
        total = 0
        for st in self.stages:
            m, shape = st.macs(shape)
            total += m
        return total, shape


class PlainUpsampler(Module):
    """Single x``scale`` sub-pixel layer used when MSCU is ablated."""

    def __init__(self, cin, scale, rng=None):
        self.up = SubPixelConv2d(cin, 3, scale, k=3, rng=rng)

    def forward(self, features, center_lr, return_state=False):
        out = self.up(features)
        return (out, None) if return_state else out

    def macs(self, shape):
        return self.up.macs(shape)
