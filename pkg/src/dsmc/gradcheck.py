"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    num = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = num.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return num


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / (|analytic| + 1e-12).

    ``f`` maps ``x`` to a scalar tensor; ``x`` should be float64.  Other
    leaves touched by ``f`` may also accumulate gradients as a side effect.
    """
    x.requires_grad = True
    x.grad = None
    y = f(x)
    backward(y)
    analytic = x.grad.copy()
    numeric = numerical_grad(f, x, h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)))
