"""Tensor value type with reverse-mode automatic differentiation.

Every differentiable operation records a node on a per-thread tape.  Nodes
carry a monotonically increasing sequence number, so the tape order is the
order of creation and a reverse walk over reachable nodes sorted by that
number is a valid reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Node:
    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op: str, parents: tuple, backward: Callable, seq: int):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = seq


class Tape(threading.local):
    """Per-thread recording state: the sequence counter and the grad switch."""

    def __init__(self):
        self.counter = itertools.count()
        self.enabled = True

    def record(self, op, parents, backward):
        return Node(op, parents, backward, next(self.counter))


_tape = Tape()


@contextlib.contextmanager
def no_grad():
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def grad_enabled() -> bool:
    return _tape.enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autograd ------------------------------------------------------
    def backward(self):
        backward(self)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` and record a tape node if any parent needs a gradient.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = _tape.record(op, tuple(parents), backward_fn)
    return out


def backward(root: Tensor) -> dict:
    """Propagate d(root)/d(x) to every reachable tensor with ``requires_grad``.

    Leaf tensors accumulate into ``.grad``; the returned mapping holds the
    gradient of every tensor visited, keyed by ``id``.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root is not connected to the tape")

    nodes = {}
    stack = [root]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None:
            nodes[t.node.seq] = t
            stack.extend(p for p in t.node.parents if p.requires_grad)

    grads = {id(root): np.ones_like(root.data)}
    for seq in sorted(nodes, reverse=True):
        t = nodes[seq]
        g = grads.get(id(t))
        if g is None:
            continue
        parent_grads = t.node.backward(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise ShapeError(f"{t.node.op}: gradient shape {pg.shape} != operand {p.data.shape}")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    for t in _leaves(root):
        g = grads.get(id(t))
        if g is None:
            continue
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g
    return grads


def _leaves(root: Tensor) -> Iterable[Tensor]:
    stack, seen = [root], set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is None:
            if t.requires_grad:
                yield t
        else:
            stack.extend(t.node.parents)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def _binary_operands(a, b, op):
    a = as_tensor(a)
    if isinstance(b, np.ndarray) and b.ndim:
        b = Tensor(b.astype(a.dtype, copy=False))
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.ndim != 0:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return a, b, False
    if np.ndim(b) != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {np.shape(b)}")
    return a, float(b), True


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b, scalar = _binary_operands(a, b, "add")
    if scalar:
        return make_result(a.data + a.dtype.type(b), "add", (a,), lambda g: (g,))
    return make_result(a.data + b.data, "add", (a, b),
                       lambda g: (g, _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b, scalar = _binary_operands(a, b, "sub")
    if scalar:
        return make_result(a.data - a.dtype.type(b), "sub", (a,), lambda g: (g,))
    return make_result(a.data - b.data, "sub", (a, b),
                       lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b, scalar = _binary_operands(a, b, "mul")
    if scalar:
        s = a.dtype.type(b)
        return make_result(a.data * s, "scalar_mul", (a,), lambda g: (g * s,))
    ad, bd = a.data, b.data
    return make_result(ad * bd, "mul", (a, b),
                       lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, "neg", (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    r = 1.0 / a.data
    return make_result(r, "reciprocal", (a,), lambda g: (-g * r * r,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    p = float(p)
    return make_result(ad ** p, "pow", (a,), lambda g: (g * p * ad ** (p - 1.0),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return make_result(r, "sqrt", (a,), lambda g: (g * 0.5 / r,))


def exp(a: Tensor) -> Tensor:
    r = np.exp(a.data)
    return make_result(r, "exp", (a,), lambda g: (g * r,))


def leaky_relu(a: Tensor, alpha: float = 0.1) -> Tensor:
    if alpha <= 0:
        raise ValueError(f"leaky_relu slope must be positive, got {alpha}")
    ad = a.data
    slope = np.where(ad >= 0, ad.dtype.type(1), ad.dtype.type(alpha))
    return make_result(ad * slope, "leaky_relu", (a,), lambda g: (g * slope,))


# ----------------------------------------------------------------------
# reductions and shape manipulation
# ----------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return make_result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,),
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the backward pass sums over the expanded axes."""
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)
    if lead < 0:
        raise ShapeError(f"cannot broadcast {src} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, (s, d) in enumerate(zip(src, shape[lead:])) if s == 1 and d != 1)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as err:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from err
    return make_result(out, "broadcast", (a,),
                       lambda g: (g.sum(axis=axes, keepdims=True).reshape(src),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_result(np.array(a.data[idx]), "getitem", (a,), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> list:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(a, tuple(idx)))
        start += s
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, "matmul", (a, b), bw)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, "softmax", (a,), bw)
