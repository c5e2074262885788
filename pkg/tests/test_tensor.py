import numpy as np
import pytest

from drhdr import ops
from drhdr import tensor as T
from drhdr.tensor import Tape, Tensor, backward, grad_check


def scalarize(arr):
    return Tensor(np.asarray(arr, dtype=np.float32).reshape(1, 1, 1, 1))


def test_tensor_requires_4d():
    with pytest.raises(ValueError):
        Tensor(np.zeros((3, 3)))


def test_sum_backward_is_ones(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        y = T.sum_all(x)
    backward(tape, y)
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_square_sum_gradient():
    # f(x) = sum(x^2), x = [2] -> grad = [4]
    x = Tensor(np.full((1, 1, 1, 1), 2.0, np.float32), requires_grad=True)
    with Tape() as tape:
        y = T.sum_all(T.mul(x, x))
    backward(tape, y)
    assert x.grad.reshape(()) == pytest.approx(4.0)


def test_backward_accumulates_exact_doubling(rng):
    x = Tensor(rng.standard_normal((1, 1, 4, 4)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        y = T.mean_all(T.mul(x, x))
    backward(tape, y)
    once = x.grad.copy()
    backward(tape, y)
    assert np.array_equal(x.grad, 2.0 * once)


def test_backward_linearity(rng):
    xv = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
    a, b = 2.5, -1.25

    def grad_of(fn):
        x = Tensor(xv, requires_grad=True)
        with Tape() as tape:
            y = fn(x)
        backward(tape, y)
        return x.grad

    gf = grad_of(lambda x: T.sum_all(T.mul(x, x)))
    gg = grad_of(lambda x: T.sum_all(ops.tanh_elem(x)))
    gboth = grad_of(lambda x: T.add(T.scale(T.sum_all(T.mul(x, x)), a),
                                    T.scale(T.sum_all(ops.tanh_elem(x)), b)))
    assert np.allclose(gboth, a * gf + b * gg, atol=1e-6)


def test_backward_rejects_foreign_tensor(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        _ = T.sum_all(x)
    stranger = scalarize(1.0)
    with pytest.raises(ValueError, match="not produced by this tape"):
        backward(tape, stranger)


def test_backward_needs_scalar_or_seed(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, y)
    backward(tape, y, seed=np.ones_like(y.data))
    assert np.allclose(x.grad, 2 * x.data, atol=1e-6)


def test_shape_mismatch_errors(rng):
    a = Tensor(np.zeros((1, 1, 2, 2), np.float32))
    b = Tensor(np.zeros((1, 1, 2, 3), np.float32))
    with pytest.raises(ValueError, match="shape mismatch"):
        T.add(a, b)


def test_operator_sugar(rng):
    x = Tensor(rng.uniform(0.5, 1.0, (1, 1, 2, 2)).astype(np.float32))
    y = (x * 2.0 + 1.0 - x) / 2.0
    assert np.allclose(y.data, (x.data * 2 + 1 - x.data) / 2, atol=1e-6)
    z = -x
    assert np.allclose(z.data, -x.data)


def test_exact_scalar_carried_through_reductions():
    # the float64 value survives even when float32 storage would round it
    vals = np.full((1, 1, 64, 64), 1.0 / 3.0, np.float32)
    t = T.sum_all(Tensor(vals))
    assert t.exact is not None
    assert t.item() == pytest.approx(float(vals.astype(np.float64).sum()), rel=1e-12)


def test_grad_check_trivial_sum(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
    assert grad_check(T.sum_all, x, eps=1e-3) < 1e-6


def test_grad_check_three_op_composites():
    # random smooth 3-op composites, gradients vs central differences
    for seed in range(5):
        r = np.random.default_rng(seed)
        x = Tensor(r.uniform(-1.2, 1.2, (1, 2, 5, 5)).astype(np.float32))
        c = Tensor(r.uniform(0.5, 1.5, (1, 2, 5, 5)).astype(np.float32))
        err = grad_check(lambda t: T.mean_all(ops.tanh_elem(T.mul(t, c))), x, eps=1e-3)
        assert err < 1e-3, f"seed {seed}: {err}"


def test_grad_check_rejects_nonscalar(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32))
    with pytest.raises(ValueError):
        grad_check(lambda t: T.mul(t, t), x)


def test_abs_subgradient_positive_side_at_zero():
    x = Tensor(np.zeros((1, 1, 1, 2), np.float32), requires_grad=True)
    with Tape() as tape:
        y = T.sum_all(T.abs_elem(x))
    backward(tape, y)
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_log1p_domain_and_gradient(rng):
    with pytest.raises(ValueError):
        T.log1p_elem(Tensor(np.full((1, 1, 1, 1), -1.5, np.float32)))
    x = Tensor(rng.uniform(0.1, 2.0, (1, 1, 4, 4)).astype(np.float32))
    assert grad_check(lambda t: T.mean_all(T.log1p_elem(t)), x, eps=1e-3) < 1e-3


def test_intermediate_gradients_populated(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        mid = T.mul(x, x)
        y = T.sum_all(mid)
    backward(tape, y)
    assert mid.grad is not None and np.allclose(mid.grad, 1.0)
