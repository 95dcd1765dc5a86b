"""Differentiable array operators built on :mod:`dsmc.tensor`.

Convolutions use a channels-last im2col layout: the column matrix has one
row per output position and ``kernel_volume * in_channels`` columns ordered
(kernel taps, channel).  Deformable convolution produces its columns in the
same layout, so with zero offsets it runs the very same matrix product as
:func:`conv2d`.
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CUBIC_A = -0.5


def _tuple(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------

def out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, ksize, stride, pad):
    n, c = x.shape[:2]
    nd = len(ksize)
    xl = np.moveaxis(x, 1, -1)
    if any(pad):
        xl = np.pad(xl, [(0, 0)] + [(p, p) for p in pad] + [(0, 0)])
    padded = xl.shape[1:-1]
    out = tuple(out_extent(s, k, st, p) for s, k, st, p in zip(x.shape[2:], ksize, stride, pad))
    if min(out) < 1:
        raise ShapeError(f"convolution output extent {out} < 1 for input {x.shape}, kernel {ksize}")
    win = sliding_window_view(xl, ksize, axis=tuple(range(1, nd + 1)))
    win = win[(slice(None),) + tuple(slice(None, None, st) for st in stride)]
    perm = (0,) + tuple(range(1, nd + 1)) + tuple(range(nd + 2, 2 * nd + 2)) + (nd + 1,)
    cols = win.transpose(perm).reshape(n * int(np.prod(out)), int(np.prod(ksize)) * c)
    return cols, out, padded


def _col2im(dcols, n, c, out, ksize, stride, pad, padded, spatial, dtype):
    nd = len(ksize)
    dcols = dcols.reshape((n,) + out + ksize + (c,))
    dxl = np.zeros((n,) + padded + (c,), dtype=dtype)
    lead = (slice(None),) * (nd + 1)
    for kk in np.ndindex(*ksize):
        sl = (slice(None),) + tuple(
            slice(k, k + st * (o - 1) + 1, st) for k, st, o in zip(kk, stride, out))
        dxl[sl] += dcols[lead + kk]
    crop = (slice(None),) + tuple(slice(p, p + s) for p, s in zip(pad, spatial))
    return np.ascontiguousarray(np.moveaxis(dxl[crop], -1, 1))


def _weight_matrix(w):
    # (O, C, *k) -> (O, K*C) in (taps, channel) order
    return np.moveaxis(w, 1, -1).reshape(w.shape[0], -1)


def _cols_product(cols, w, b, n, out):
    y = cols @ _weight_matrix(w).T
    if b is not None:
        y += b
    y = y.reshape((n,) + out + (w.shape[0],))
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def _conv_nd(x, weight, bias, stride, pad, nd, name):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != nd + 2 or weight.ndim != nd + 2:
        raise ShapeError(f"{name}: expected {nd + 2}-d input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"{name}: input channels {x.shape[1]} != weight in-channels {weight.shape[1]}")
    ksize = weight.shape[2:]
    if any(k % 2 == 0 for k in ksize):
        raise ShapeError(f"{name}: kernel extents must be odd, got {ksize}")
    stride, pad = _tuple(stride, nd), _tuple(pad, nd)
    n, c = x.shape[:2]
    cols, out, padded = _im2col(x.data, ksize, stride, pad)
    bd = None if bias is None else bias.data
    y = _cols_product(cols, weight.data, bd, n, out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = np.moveaxis(g, 1, -1).reshape(-1, weight.shape[0])
        dw = (gm.T @ cols).reshape((weight.shape[0],) + ksize + (c,))
        dw = np.ascontiguousarray(np.moveaxis(dw, -1, 1))
        dx = None
        if x.requires_grad:
            dcols = gm @ _weight_matrix(weight.data)
            dx = _col2im(dcols, n, c, out, ksize, stride, pad, padded, x.shape[2:], x.dtype)
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0)

    return make_result(y, name, parents, bw)


def conv2d(x, weight, bias=None, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation on NCHW input with an OIkk weight."""
    return _conv_nd(x, weight, bias, stride, pad, 2, "conv2d")


def conv3d(x, weight, bias=None, stride=1, pad=0) -> Tensor:
    """3-D cross-correlation on NCDHW input with an OIkkk weight."""
    return _conv_nd(x, weight, bias, stride, pad, 3, "conv3d")


# ----------------------------------------------------------------------
# deformable convolution (v1: no modulation, one offset group)
# ----------------------------------------------------------------------

def _bilinear_taps(offset, h, w, ksize, stride, pad):
    """Corner indices and weights for every (n, ho, wo, tap) sample."""
    n, _, ho, wo = offset.shape
    kh, kw = ksize
    kk = kh * kw
    off = offset.reshape(n, kk, 2, ho, wo).transpose(0, 3, 4, 1, 2)
    dt = offset.dtype
    base_y = (np.arange(ho) * stride[0] - pad[0])[:, None, None] + np.repeat(np.arange(kh), kw)[None, None, :]
    base_x = (np.arange(wo) * stride[1] - pad[1])[None, :, None] + np.tile(np.arange(kw), kh)[None, None, :]
    py = base_y.astype(dt)[None] + off[..., 0]
    px = base_x.astype(dt)[None] + off[..., 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    nidx = np.arange(n)[:, None, None, None] * (h * w)
    sentinel = n * h * w
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, nidx + yy * w + xx, sentinel).reshape(-1)
        wy = ly if dy else 1 - ly
        wx = lx if dx else 1 - lx
        corners.append((idx, (wy * wx).reshape(-1), valid.reshape(-1)))
    return corners, ly.reshape(-1), lx.reshape(-1)


def deform_conv2d(x, offset, weight, bias=None, stride=1, pad=1) -> Tensor:
    """Deformable convolution: sample ``x`` at p + p_k + offset_k bilinearly.

    ``offset`` is (N, 2*kh*kw, Ho, Wo) with (dy, dx) pairs per tap.  Samples
    falling outside the image read zero.
    """
    x, offset, weight = as_tensor(x), as_tensor(offset), as_tensor(weight)
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"deform_conv2d: input channels {c} != weight in-channels {ci}")
    stride, pad = _tuple(stride, 2), _tuple(pad, 2)
    ho, wo = out_extent(h, kh, stride[0], pad[0]), out_extent(w, kw, stride[1], pad[1])
    if offset.shape != (n, 2 * kh * kw, ho, wo):
        raise ShapeError(f"deform_conv2d: offset shape {offset.shape} != {(n, 2 * kh * kw, ho, wo)}")
    corners, ly, lx = _bilinear_taps(offset.data, h, w, (kh, kw), stride, pad)
    xt = np.concatenate([x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c),
                         np.zeros((1, c), dtype=x.dtype)])
    m = corners[0][0].size
    # one row per (n, ho, wo, tap) sample, four bilinear corners each
    ri = np.concatenate([np.arange(m)[v] for _, _, v in corners])
    ci_ = np.concatenate([i[v] for i, _, v in corners])
    vals = np.concatenate([cw[v] for _, cw, v in corners])
    smat = sp.csr_matrix((vals, (ri, ci_)), shape=(m, n * h * w))
    rows = np.asarray(smat @ xt[:-1])
    kk = kh * kw
    cols = rows.reshape(n * ho * wo, kk * c)
    bd = None if bias is None else bias.data
    y = _cols_product(cols, weight.data, bd, n, (ho, wo))
    parents = (x, offset, weight) if bias is None else (x, offset, weight, bias)

    def bw(g):
        gm = np.moveaxis(g, 1, -1).reshape(-1, o)
        dw = (gm.T @ cols).reshape(o, kh, kw, c)
        dw = np.ascontiguousarray(np.moveaxis(dw, -1, 1))
        drows = (gm @ _weight_matrix(weight.data)).reshape(-1, c)
        dx = doff = None
        if x.requires_grad:
            dxt = np.asarray(smat.T @ drows)
            dx = np.ascontiguousarray(dxt.reshape(n, h, w, c).transpose(0, 3, 1, 2)).astype(x.dtype)
        if offset.requires_grad:
            a = [np.einsum("ij,ij->i", drows, xt[idx]) for idx, _, _ in corners]
            dly = (1 - lx) * (a[2] - a[0]) + lx * (a[3] - a[1])
            dlx = (1 - ly) * (a[1] - a[0]) + ly * (a[3] - a[2])
            d = np.stack([dly, dlx], axis=-1).reshape(n, ho, wo, kk, 2)
            doff = np.ascontiguousarray(d.transpose(0, 3, 4, 1, 2).reshape(n, 2 * kk, ho, wo))
        grads = (dx, doff, dw)
        return grads if bias is None else grads + (gm.sum(axis=0),)

    return make_result(y, "deform_conv2d", parents, bw)


# ----------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------

def batch_norm2d(x, gamma, beta, running_mean, running_var, training=True,
                 momentum=BN_MOMENTUM, eps=BN_EPS) -> Tensor:
    """Per-channel batch normalization of NCHW input.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: channel count {c} vs gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    count = x.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (count / max(count - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    shape = (1, c, 1, 1)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    y = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * inv_std.reshape(shape)
        else:
            dx = dxhat * inv_std.reshape(shape)
        return dx, dgamma, dbeta

    return make_result(y, "batch_norm2d", (x, gamma, beta), bw)


# ----------------------------------------------------------------------
# rearrangement
# ----------------------------------------------------------------------

def _shuffle(a, r):
    n, cr, h, w = a.shape
    c = cr // (r * r)
    return a.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)


def _unshuffle(a, r):
    n, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    return a.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_shuffle2d(x, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, r*H, r*W) with out[n,c,rh+i,rw+j] = in[n, c*r*r+i*r+j, h, w]."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle2d: channels of {x.shape} not divisible by r^2={r * r}")
    return make_result(_shuffle(x.data, r), "pixel_shuffle2d", (x,),
                       lambda g: (np.ascontiguousarray(_unshuffle(g, r)),))


def pixel_unshuffle2d(x, r: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle2d: spatial extents of {x.shape} not divisible by {r}")
    return make_result(_unshuffle(x.data, r), "pixel_unshuffle2d", (x,),
                       lambda g: (np.ascontiguousarray(_shuffle(g, r)),))


# ----------------------------------------------------------------------
# bicubic resampling
# ----------------------------------------------------------------------

def cubic_kernel(t, a=CUBIC_A):
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """Dense (n_out, n_in) float64 matrix of the 1-D bicubic resampler.

    Pixel centers are aligned (half-pixel convention).  When shrinking with
    ``antialias`` the kernel is stretched by 1/scale.  Taps beyond the border
    are clamped to the edge sample; each row is normalized to sum to one.
    """
    scale = n_out / n_in
    kscale = min(scale, 1.0) if antialias else 1.0
    support = 2.0 / kscale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    width = int(np.ceil(2 * support)) + 1
    first = np.floor(centers - support).astype(np.int64) + 1
    taps = first[:, None] + np.arange(width)[None, :]
    wts = cubic_kernel((taps - centers[:, None]) * kscale)
    wts /= wts.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), width)
    np.add.at(mat, (rows, np.clip(taps, 0, n_in - 1).reshape(-1)), wts.reshape(-1))
    return mat


def resized_extent(n: int, scale) -> int:
    return int(round(Fraction(scale).limit_denominator(1 << 16) * n))


def bicubic_resize(x, scale=None, size=None, antialias: bool = True) -> Tensor:
    """Separable bicubic resize (a = -0.5) over the last two axes."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError(f"bicubic_resize: scale must be positive, got {scale}")
        size = (resized_extent(h, scale), resized_extent(w, scale))
    ho, wo = size
    if ho < 1 or wo < 1:
        raise ShapeError(f"bicubic_resize: target size {size} is not positive")
    mh = resize_matrix(h, ho, antialias)
    mw = resize_matrix(w, wo, antialias)
    # accumulate in f64 so constant images survive f32 round-trips exactly
    y = np.matmul(np.matmul(mh, x.data.astype(np.float64)), mw.T).astype(x.dtype)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g.astype(np.float64)), mw).astype(x.dtype),)

    return make_result(y, "bicubic_resize", (x,), bw)
