"""Module system and the composite blocks the network is assembled from."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, broadcast_to, concat, getitem, leaky_relu, matmul, softmax

LRELU_SLOPE = 0.1


class ResourceError(RuntimeError):
    """Raised when an operation would exceed a configured memory budget."""


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Minimal container: parameters, buffers and submodules are discovered
    from instance attributes in assignment order, which keeps parameter
    names stable across runs."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = ""):
        for name, value in getattr(self, "_buffers", {}).items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def register_buffer(self, name, value: np.ndarray):
        if "_buffers" not in vars(self):
            self._buffers = {}
        self._buffers[name] = value

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for k, v in getattr(m, "_buffers", {}).items():
                m._buffers[k] = v.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def macs(self, shape):
        """Multiply-accumulate count for one forward pass; returns (macs, out_shape)."""
        raise NotImplementedError(type(self).__name__)


def _uniform(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


def frames_to_batch(x: Tensor) -> Tensor:
    """(N, C, D, H, W) -> (N*D, C, H, W)."""
    n, c, d, h, w = x.shape
    return x.transpose(0, 2, 1, 3, 4).reshape(n * d, c, h, w)


def batch_to_frames(x: Tensor, n: int) -> Tensor:
    nd, c, h, w = x.shape
    return x.reshape(n, nd // n, c, h, w).transpose(0, 2, 1, 3, 4)


# ----------------------------------------------------------------------
# plain layers
# ----------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, pad=None, bias=True, rng=None, zero_init=False):
        rng = _rng(rng)
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        fan_in = cin * k * k
        shape = (cout, cin, k, k)
        self.weight = Parameter(np.zeros(shape, np.float32) if zero_init else _uniform(rng, shape, fan_in))
        self.bias = None
        if bias:
            self.bias = Parameter(np.zeros(cout, np.float32) if zero_init else _uniform(rng, cout, fan_in))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def macs(self, shape):
        n, c, h, w = shape
        o, _, k, _ = self.weight.shape
        ho, wo = F.out_extent(h, k, self.stride, self.pad), F.out_extent(w, k, self.stride, self.pad)
        return n * o * ho * wo * c * k * k, (n, o, ho, wo)


class Conv3d(Module):
    def __init__(self, cin, cout, k=3, stride=1, pad=None, bias=True, rng=None, zero_init=False):
        rng = _rng(rng)
        k = F._tuple(k, 3)
        self.stride = F._tuple(stride, 3)
        self.pad = tuple(i // 2 for i in k) if pad is None else F._tuple(pad, 3)
        fan_in = cin * int(np.prod(k))
        shape = (cout, cin) + k
        self.weight = Parameter(np.zeros(shape, np.float32) if zero_init else _uniform(rng, shape, fan_in))
        self.bias = None
        if bias:
            self.bias = Parameter(np.zeros(cout, np.float32) if zero_init else _uniform(rng, cout, fan_in))

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, self.stride, self.pad)

    def macs(self, shape):
        n, c = shape[:2]
        o = self.weight.shape[0]
        k = self.weight.shape[2:]
        out = tuple(F.out_extent(s, kk, st, p) for s, kk, st, p in zip(shape[2:], k, self.stride, self.pad))
        return n * o * int(np.prod(out)) * c * int(np.prod(k)), (n, o) + out


class BatchNorm2d(Module):
    def __init__(self, c, momentum=F.BN_MOMENTUM, eps=F.BN_EPS):
        self.gamma = Parameter(np.ones(c, np.float32))
        self.beta = Parameter(np.zeros(c, np.float32))
        self.momentum, self.eps = momentum, eps
        self.register_buffer("running_mean", np.zeros(c, np.float32))
        self.register_buffer("running_var", np.ones(c, np.float32))

    def forward(self, x):
        return F.batch_norm2d(x, self.gamma, self.beta, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum, self.eps)

    def macs(self, shape):
        return 0, shape


# ----------------------------------------------------------------------
# deformable convolution and DResNet
# ----------------------------------------------------------------------

class DeformConv2d(Module):
    """Deformable conv v1; a zero-initialized 3x3 conv predicts the offsets,
    so a fresh layer behaves exactly like a standard convolution."""

    def __init__(self, cin, cout, k=3, bias=True, rng=None):
        rng = _rng(rng)
        self.k = k
        fan_in = cin * k * k
        self.weight = Parameter(_uniform(rng, (cout, cin, k, k), fan_in))
        self.bias = Parameter(_uniform(rng, cout, fan_in)) if bias else None
        self.offset = Conv2d(cin, 2 * k * k, 3, rng=rng, zero_init=True)

    def forward(self, x):
        off = self.offset(x)
        return F.deform_conv2d(x, off, self.weight, self.bias, 1, self.k // 2)

    def macs(self, shape):
        n, c, h, w = shape
        o = self.weight.shape[0]
        off_macs, _ = self.offset.macs(shape)
        # the bilinear gather costs four multiply-adds per sampled value
        sample = 4 * n * c * self.k * self.k * h * w
        return off_macs + sample + n * o * h * w * c * self.k * self.k, (n, o, h, w)


class DeformResBlock(Module):
    def __init__(self, c, rng=None):
        self.conv1 = DeformConv2d(c, c, rng=rng)
        self.conv2 = DeformConv2d(c, c, rng=rng)

    def forward(self, x):
        return x + self.conv2(leaky_relu(self.conv1(x), LRELU_SLOPE))

    def macs(self, shape):
        m1, s = self.conv1.macs(shape)
        m2, s = self.conv2.macs(s)
        return m1 + m2, s


class DResNet(Module):
    def __init__(self, c, depth=3, rng=None):
        self.blocks = [DeformResBlock(c, rng=rng) for _ in range(depth)]

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x

    def macs(self, shape):
        total = 0
        for b in self.blocks:
            m, shape = b.macs(shape)
            total += m
        return total, shape


class ResBlock(Module):
    def __init__(self, c, rng=None):
        self.conv1 = Conv2d(c, c, 3, rng=rng)
        self.conv2 = Conv2d(c, c, 3, rng=rng)

    def forward(self, x):
        return x + self.conv2(leaky_relu(self.conv1(x), LRELU_SLOPE))

    def macs(self, shape):
        m1, s = self.conv1.macs(shape)
        m2, s = self.conv2.macs(s)
        return m1 + m2, s


class SubPixelConv2d(Module):
    """Conv to ``cout * r * r`` channels followed by a pixel shuffle."""

    def __init__(self, cin, cout, r=2, k=3, rng=None, zero_init=False):
        self.r = r
        self.conv = Conv2d(cin, cout * r * r, k, rng=rng, zero_init=zero_init)

    def forward(self, x):
        return F.pixel_shuffle2d(self.conv(x), self.r)

    def macs(self, shape):
        m, (n, c, h, w) = self.conv.macs(shape)
        r = self.r
        return m, (n, c // (r * r), h * r, w * r)


# ----------------------------------------------------------------------
# 3-D dense groups and transitions
# ----------------------------------------------------------------------

class DenseBlock3d(Module):
    """1x1x1 bottleneck (feature decomposition) then 3x3x3 body producing
    ``growth`` channels."""

    def __init__(self, cin, growth, bottleneck, rng=None):
        self.cin = cin
        self.reduce = Conv3d(cin, bottleneck, 1, rng=rng)
        self.body = Conv3d(bottleneck, growth, 3, rng=rng)

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise ShapeError(f"dense block expects {self.cin} channels, got {x.shape[1]}")
        return leaky_relu(self.body(leaky_relu(self.reduce(x), LRELU_SLOPE)), LRELU_SLOPE)

    def macs(self, shape):
        m1, s = self.reduce.macs(shape)
        m2, s = self.body.macs(s)
        return m1 + m2, s


class DenseGroup3d(Module):
    """``L`` densely connected blocks followed by the final block that reads
    the concatenation of the input and every block output.

    Block ``l`` sees ``cin + l * growth`` channels; the final block sees
    ``cin + L * growth`` and emits ``growth``.
    """

    def __init__(self, cin, n_blocks, growth, bottleneck, rng=None):
        if n_blocks < 1:
            raise ValueError("a dense group needs at least one block")
        self.cin, self.growth = cin, growth
        self.blocks = [DenseBlock3d(cin + l * growth, growth, bottleneck, rng=rng) for l in range(n_blocks)]
        self.fuse = Conv3d(cin + n_blocks * growth, growth, 1, rng=rng)
        for l, b in enumerate(self.blocks):
            if b.cin != cin + l * growth:
                raise ShapeError(f"dense channel ledger broken at block {l}")

    @property
    def channel_ledger(self):
        return [b.cin for b in self.blocks], self.fuse.weight.shape[1]

    def forward(self, x):
        feats = [x]
        for b in self.blocks:
            feats.append(b(concat(feats, axis=1)))
        return self.fuse(concat(feats, axis=1))

    def macs(self, shape):
        n, c, d, h, w = shape
        total = 0
        for b in self.blocks:
            m, _ = b.macs((n, c, d, h, w))
            total += m
            c += self.growth
        m, s = self.fuse.macs((n, c, d, h, w))
        return total + m, s


class Transition3d(Module):
    """Channel compression by ``theta`` with temporal stride 2 (ceil halving)."""

    def __init__(self, cin, theta=0.5, rng=None):
        self.cout = int(math.floor(theta * cin))
        if self.cout < 1:
            raise ValueError(f"compression {theta} leaves no channels from {cin}")
        self.conv = Conv3d(cin, self.cout, 1, stride=(2, 1, 1), pad=0, rng=rng)

    def forward(self, x):
        return self.conv(x)

    def macs(self, shape):
        return self.conv.macs(shape)


# ----------------------------------------------------------------------
# non-local attention
# ----------------------------------------------------------------------

class NonLocal3d(Module):
    """Embedded-Gaussian non-local block over all D*H*W positions."""

    def __init__(self, c, inner=None, max_positions=4096, rng=None):
        inner = inner or max(c // 2, 1)
        self.inner = inner
        self.max_positions = max_positions
        self.theta = Conv3d(c, inner, 1, rng=rng)
        self.phi = Conv3d(c, inner, 1, rng=rng)
        self.g = Conv3d(c, inner, 1, rng=rng)
        self.out = Conv3d(inner, c, 1, rng=rng)
        self.last_attention = None

    def forward(self, x, keep_attention=False):
        n, c, d, h, w = x.shape
        p = d * h * w
        if p > self.max_positions:
            raise ResourceError(
                f"non-local over {p} positions exceeds the budget of {self.max_positions}; "
                "reduce the input or raise max_positions")
        th = self.theta(x).reshape(n, self.inner, p).transpose(0, 2, 1)
        ph = self.phi(x).reshape(n, self.inner, p)
        gx = self.g(x).reshape(n, self.inner, p).transpose(0, 2, 1)
        attn = softmax(matmul(th, ph), axis=-1)
        if keep_attention:
            self.last_attention = attn.data
        y = matmul(attn, gx).transpose(0, 2, 1).reshape(n, self.inner, d, h, w)
        return x + self.out(y)

    def macs(self, shape):
        n, c, d, h, w = shape
        p = d * h * w
        emb = 3 * n * p * c * self.inner
        pair = 2 * n * p * p * self.inner
        return emb + pair + n * p * self.inner * c, shape


def temporal_expand(x: Tensor, depth: int) -> Tensor:
    """Stretch the temporal axis of NCDHW ``x`` to ``depth`` slices.

    A single slice is broadcast; otherwise slice j takes source floor(j*D/depth).
    """
    d = x.shape[2]
    if d == depth:
        return x
    if d == 1:
        n, c, _, h, w = x.shape
        return broadcast_to(x, (n, c, depth, h, w))
    idx = (np.arange(depth) * d) // depth
    return getitem(x, (slice(None), slice(None), idx))
