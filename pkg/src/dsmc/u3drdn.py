"""U-shaped residual dense network with 3-D convolution.

Pipeline (per clip of D frames, NCDHW):

    skip ------------------------------------------------------------+
      |                                                               |
    3x3 stride-2 conv per frame -> [dense group -> transition] * (m-1)
      -> dense group -> 1x1x1 channel match -> non-local
      -> sub-pixel x2 decode per frame -> temporal broadcast -> (+) skip

The "flat" variant keeps the groups, channel match and non-local but runs
them at full resolution without the encode/decode pair.
"""

from __future__ import annotations

from dataclasses import dataclass

from .nn import (Conv2d, Conv3d, DenseGroup3d, LRELU_SLOPE, Module, NonLocal3d, SubPixelConv2d,
                 Transition3d, batch_to_frames, frames_to_batch, temporal_expand)
from .tensor import ShapeError, leaky_relu


@dataclass
class U3DRDNConfig:
    channels: int = 64
    group_sizes: tuple = (2, 6, 6, 3)
    growth: int = 32
    bottleneck: int = 128
    compression: float = 0.5
    decode_kernel: int = 1
    nonlocal_: bool = True
    max_positions: int = 4096
    flat: bool = False

    def __post_init__(self):
        self.group_sizes = tuple(int(v) for v in self.group_sizes)
        if not self.group_sizes:
            raise ValueError("U3D-RDN needs at least one dense group")
        if any(v < 1 for v in self.group_sizes):
            raise ValueError(f"group sizes must be >= 1, got {self.group_sizes}")

    @property
    def m(self) -> int:
        return len(self.group_sizes)


class U3DRDN(Module):
    def __init__(self, cfg: U3DRDNConfig, rng=None):
        self.cfg = cfg
        c = cfg.channels
        if not cfg.flat:
            self.encode = Conv2d(c, c, 3, stride=2, pad=1, rng=rng)
        groups, transitions = [], []
        cin = c
        for i, size in enumerate(cfg.group_sizes):
            groups.append(DenseGroup3d(cin, size, cfg.growth, cfg.bottleneck, rng=rng))
            cin = cfg.growth
            if i < cfg.m - 1:
                t = Transition3d(cin, cfg.compression, rng=rng)
                transitions.append(t)
                cin = t.cout
        self.groups = groups
        self.transitions = transitions
        self.match = Conv3d(cfg.growth, c, 1, rng=rng)
        if cfg.nonlocal_:
            self.nonlocal_block = NonLocal3d(c, max_positions=cfg.max_positions, rng=rng)
        if not cfg.flat:
            self.decode = SubPixelConv2d(c, c, 2, k=cfg.decode_kernel, rng=rng)

    def body(self, y):
        for i, group in enumerate(self.groups):
            y = group(y)
            if i < len(self.transitions):
                y = self.transitions[i](y)
        y = self.match(y)
        if self.cfg.nonlocal_:
            y = self.nonlocal_block(y)
        return y

    def forward(self, x):
        n, c, d, h, w = x.shape
        if c != self.cfg.channels:
            raise ShapeError(f"U3D-RDN expects {self.cfg.channels} channels, got {c}")
        if self.cfg.flat:
            return x + temporal_expand(self.body(x), d)
        if h % 2 or w % 2:
            raise ShapeError(f"U3D-RDN needs even spatial extents, got {h}x{w}; pad the frames first")
        y = batch_to_frames(leaky_relu(self.encode(frames_to_batch(x)), LRELU_SLOPE), n)
        y = self.body(y)
        y = batch_to_frames(self.decode(frames_to_batch(y)), n)
        return x + temporal_expand(y, d)

    def macs(self, shape):
        n, c, d, h, w = shape
        total = 0
        if not self.cfg.flat:
            m, (_, _, h2, w2) = self.encode.macs((n * d, c, h, w))
            total += m
            s = (n, c, d, h2, w2)
        else:
            s = shape
        for i, group in enumerate(self.groups):
            m, s = group.macs(s)
            total += m
            if i < len(self.transitions):
                m, s = self.transitions[i].macs(s)
                total += m
        m, s = self.match.macs(s)
        total += m
        if self.cfg.nonlocal_:
            m, s = self.nonlocal_block.macs(s)
            total += m
        if not self.cfg.flat:
            nn_, cc, dd, hh, ww = s
            m, _ = self.decode.macs((nn_ * dd, cc, hh, ww))
            total += m
        return total, shape


def u3drdn_flops(cfg: U3DRDNConfig, shape) -> dict:
    """FLOPs (2 * MACs) of the U-shaped network and its flat ablation on ``shape``."""
    from dataclasses import replace

    u = U3DRDN(replace(cfg, flat=False))
    flat = U3DRDN(replace(cfg, flat=True))
    u_macs, _ = u.macs(tuple(shape))
    f_macs, _ = flat.macs(tuple(shape))
    return {
        "u3drdn_flops": 2 * u_macs,
        "flat_flops": 2 * f_macs,
        "ratio": f_macs / u_macs,
        "reduction": 1.0 - u_macs / f_macs,
        "u3drdn_params": u.num_parameters(),
        "flat_params": flat.num_parameters(),
    }
