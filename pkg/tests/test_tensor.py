import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dsmc.tensor import (ShapeError, Tensor, add, backward, concat, leaky_relu, mean, mul, no_grad, split,
                         square, sub, tsum)
from dsmc.gradcheck import finite_diff_check


def test_add_values():
    out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_leaky_relu_slope():
    assert leaky_relu(Tensor(-1.0), alpha=0.1).item() == pytest.approx(-0.1)
    assert leaky_relu(Tensor(2.0), alpha=0.1).item() == 2.0


def test_leaky_relu_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        leaky_relu(Tensor([1.0]), alpha=0.0)


def test_mul_product_rule():
    a = Tensor([2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    backward(tsum(mul(a, b)))
    assert a.grad[0] == 3.0 and b.grad[0] == 2.0


def test_scalar_mul_and_sub():
    a = Tensor([1.0, -2.0], requires_grad=True)
    backward(tsum(sub(mul(a, 3.0), 1.0)))
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_concat_shapes_and_identity():
    a = Tensor(np.zeros((1, 2, 4, 4)))
    b = Tensor(np.ones((1, 3, 4, 4)))
    assert concat([a, b], axis=1).shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(concat([b], axis=1).data, b.data)


def test_concat_rejects_mismatch():
    with pytest.raises(ShapeError):
        concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 4)))], axis=1)


def test_concat_gradient_is_slicing(rng):
    a = Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 1, 2)))
    wgt = rng.standard_normal((2, 4, 2))
    err = finite_diff_check(lambda t: tsum(mul(concat([t, b], axis=1), Tensor(wgt))), a)
    assert err < 1e-6
    a.grad = None
    backward(tsum(mul(concat([a, b], axis=1), Tensor(wgt))))
    np.testing.assert_allclose(a.grad, wgt[:, :3])


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=4, min_side=2, max_side=5),
                  elements=st.floats(-1e3, 1e3)))
@settings(max_examples=40, deadline=None)
def test_concat_split_roundtrip_bit_exact(x):
    t = Tensor(x)
    k = x.shape[1] // 2
    parts = split(t, [k, x.shape[1] - k], axis=1)
    assert np.array_equal(concat(parts, axis=1).data, x)


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(mul(x, 2.0))


def test_backward_visits_shared_node_once():
    # y = x*x used twice; d(sum(y + y))/dx = 4x
    x = Tensor([3.0], requires_grad=True)
    y = mul(x, x)
    backward(tsum(add(y, y)))
    assert x.grad[0] == 12.0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = mul(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_tape_is_per_thread():
    seen = []

    def worker():
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(tsum(square(x)))
        seen.append(x.grad.tolist())

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert seen == [[2.0, 4.0]] * 4


def test_finite_diff_sum_is_exact(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert finite_diff_check(lambda t: tsum(t), x) < 1e-8


def test_finite_diff_mean_square(rng):
    x = Tensor(rng.standard_normal((4, 5)))
    assert finite_diff_check(lambda t: mean(square(t)), x, h=1e-5) < 1e-6


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-10, 10)))
@settings(max_examples=40, deadline=None)
def test_leaky_relu_gradient_is_slope(x):
    t = Tensor(x.copy(), requires_grad=True)
    backward(tsum(leaky_relu(t, 0.1)))
    np.testing.assert_array_equal(t.grad, np.where(x >= 0, 1.0, 0.1))
