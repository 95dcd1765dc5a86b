"""The full network: coarse deformable features, DResNet, U3D-RDN, DResNet
over the stacked window, and the upsampler; plus the dual subnet used
only for training."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .losses import DualSubnet
from .mscu import MSCU, MSCUConfig, PlainUpsampler
from .nn import LRELU_SLOPE, BatchNorm2d, DeformConv2d, DResNet, Module
from .tensor import ShapeError, Tensor, leaky_relu
from .u3drdn import U3DRDN, U3DRDNConfig

ABLATIONS = ("no_mscu", "no_mscu_resnet", "no_mscu_comm", "no_u3drdn", "no_nonlocal",
             "no_dual", "no_perceptual")


@dataclass
class ModelConfig:
    scale: int = 4
    window: int = 5
    channels: int = 64
    dresnet_depth: int = 3
    group_sizes: tuple = (2, 6, 6, 3)
    growth: int = 32
    bottleneck: int = 128
    compression: float = 0.5
    decode_kernel: int = 1
    nonlocal_max_positions: int = 4096
    mscu_channels: int = 128
    mscu_factors: tuple = (2, 2)
    mscu_resnet_depth: int = 3
    seed: int = 0

    def __post_init__(self):
        self.group_sizes = tuple(int(v) for v in self.group_sizes)
        self.mscu_factors = tuple(int(v) for v in self.mscu_factors)
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd frame count, got {self.window}")
        MSCUConfig(factors=self.mscu_factors, scale=self.scale)

    @classmethod
    def desk(cls, **overrides):
        """Small CPU-trainable configuration."""
        base = dict(channels=32, group_sizes=(1, 2, 2, 1), dresnet_depth=1, growth=16, bottleneck=64,
                    mscu_channels=32, mscu_resnet_depth=1)
        base.update(overrides)
        return cls(**base)

    def u3drdn_config(self, ablations=()) -> U3DRDNConfig:
        return U3DRDNConfig(channels=self.channels, group_sizes=self.group_sizes, growth=self.growth,
                            bottleneck=self.bottleneck, compression=self.compression,
                            decode_kernel=self.decode_kernel, nonlocal_="no_nonlocal" not in ablations,
                            max_positions=self.nonlocal_max_positions)

    def mscu_config(self, ablations=()) -> MSCUConfig:
        return MSCUConfig(in_channels=self.channels * self.window, channels=self.mscu_channels,
                          factors=self.mscu_factors, resnet_depth=self.mscu_resnet_depth,
                          communication="no_mscu_comm" not in ablations,
                          correction="no_mscu_resnet" not in ablations, scale=self.scale)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class FeatureExtractor(Module):
    """Deformable conv -> batch norm -> LReLU, applied to every frame."""

    def __init__(self, c, rng=None):
        self.conv = DeformConv2d(3, c, rng=rng)
        self.bn = BatchNorm2d(c)

    def forward(self, x):
        return leaky_relu(self.bn(self.conv(x)), LRELU_SLOPE)

    def macs(self, shape):
        return self.conv.macs(shape)


class DSMC(Module):
    def __init__(self, cfg: ModelConfig, ablations=()):
        unknown = set(ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}")
        self.cfg = cfg
        self.ablations = frozenset(ablations)
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.extract = FeatureExtractor(c, rng=rng)
        self.dresnet1 = DResNet(c, cfg.dresnet_depth, rng=rng)
        if "no_u3drdn" not in self.ablations:
            self.u3drdn = U3DRDN(cfg.u3drdn_config(self.ablations), rng=rng)
        self.dresnet2 = DResNet(c * cfg.window, cfg.dresnet_depth, rng=rng)
        if "no_mscu" in self.ablations:
            self.upsampler = PlainUpsampler(c * cfg.window, cfg.scale, rng=rng)
        else:
            self.upsampler = MSCU(cfg.mscu_config(self.ablations), rng=rng)
        self.dual = DualSubnet(cfg.scale, rng=rng)

    def vsr_modules(self):
        names = ["extract", "dresnet1", "u3drdn", "dresnet2", "upsampler"]
        return [(n, getattr(self, n)) for n in names if hasattr(self, n)]

    def forward(self, window, return_state=False):
        """``window``: (N, T, 3, h, w) LR frames -> (N, 3, scale*h, scale*w)."""
        window = window if isinstance(window, Tensor) else Tensor(window)
        if window.ndim != 5 or window.shape[1] != self.cfg.window or window.shape[2] != 3:
            raise ShapeError(f"expected (N, {self.cfg.window}, 3, h, w) window, got {window.shape}")
        n, t, _, h, w = window.shape
        c = self.cfg.channels
        f = self.extract(window.reshape(n * t, 3, h, w))
        f = self.dresnet1(f)
        f = f.reshape(n, t, c, h, w).transpose(0, 2, 1, 3, 4)
        if hasattr(self, "u3drdn"):
            f = self.u3drdn(f)
        f = self.dresnet2(f.reshape(n, c * t, h, w))
        center = window[:, t // 2]
        return self.upsampler(f, center, return_state=return_state)

    def param_report(self) -> dict:
        out = {name: m.num_parameters() for name, m in self.vsr_modules()}
        out["dual"] = self.dual.num_parameters()
        out["total"] = sum(out.values())
        return out

    def macs_report(self, lr_shape) -> dict:
        """Per-module MACs for a (N, T, 3, h, w) input."""
        n, t, _, h, w = lr_shape
        c = self.cfg.channels
        out = {}
        out["extract"], s = self.extract.macs((n * t, 3, h, w))
        out["dresnet1"], s = self.dresnet1.macs((n * t, c, h, w))
        if hasattr(self, "u3drdn"):
            out["u3drdn"], _ = self.u3drdn.macs((n, c, t, h, w))
        out["dresnet2"], s = self.dresnet2.macs((n, c * t, h, w))
        out["upsampler"], s = self.upsampler.macs(s)
        out["dual"], _ = self.dual.macs(s)
        out["total"] = sum(out.values())
        return out
