import numpy as np
import pytest

from lcpdiff.autodiff import (
    DiffNode, add, backward, concat, gelu, layer_norm, logsumexp_max, matmul, mul, power, reshape, slice_, softmax, sum_,
    take
)
from lcpdiff.tensor import Tensor, finite_difference_gradient, relative_error
from lcpdiff.utils import BackwardError, ShapeError, UnsupportedOpError


def check_gradient(f, x: np.ndarray, tolerance: float = 1e-6) -> float:
    leaf = DiffNode.leaf(x, requires_grad=True)
    backward(f(leaf))
    numeric = finite_difference_gradient(lambda t: f(DiffNode.constant(t)).item(), Tensor(x))
    error = relative_error(leaf.grad, numeric)
    assert error < tolerance
    return error


def test_sum_gradient_is_ones():
    x = DiffNode.leaf(np.arange(6.0).reshape(2, 3), requires_grad=True)
    loss = sum_(x)
    assert loss.shape == []
    backward(loss)
    assert x.grad.array.tolist() == [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]


def test_broadcast_add_reduces_gradient():
    a = DiffNode.leaf(np.ones((2, 3)), requires_grad=True)
    b = DiffNode.leaf(np.ones(3), requires_grad=True)
    backward(sum_(add(a, b)))
    assert b.grad.array.tolist() == [2.0, 2.0, 2.0]


def test_masked_softmax_composite(rng):
    w = rng.standard_normal((3, 4))
    c = rng.standard_normal((2, 4))
    mask = np.array([[1, 1, 0, 1], [0, 1, 1, 1]])
    check_gradient(lambda x: sum_(mul(softmax(matmul(x, w), mask), c)), rng.standard_normal((2, 3)))


def test_layer_norm_gelu_composite(rng):
    gain, bias = rng.standard_normal(5), rng.standard_normal(5)
    c = rng.standard_normal((3, 5))
    check_gradient(lambda x: sum_(mul(gelu(layer_norm(x, gain, bias)), c)), rng.standard_normal((3, 5)))


def test_gather_and_smooth_max(rng):
    index = np.array([[3, 0], [5, 5]])
    check_gradient(
        lambda x: sum_(power(logsumexp_max(reshape(take(x, index), [2, 2]), 0, 0.1), 2.0)),
        rng.standard_normal((2, 3))
    )


def test_concat_splits_gradient():
    a = DiffNode.leaf(np.ones((1, 2)), requires_grad=True)
    b = DiffNode.leaf(np.ones((2, 2)), requires_grad=True)
    backward(sum_(mul(concat([a, b], axis=0), np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))))
    assert a.grad.array.tolist() == [[1.0, 2.0]]
    assert b.grad.array.tolist() == [[3.0, 4.0], [5.0, 6.0]]


def test_second_backward_raises():
    x = DiffNode.leaf(np.array([1.0, 2.0]), requires_grad=True)
    loss = sum_(power(x, 2.0))
    backward(loss)
    with pytest.raises(BackwardError):
        backward(loss)

    loss.reset()
    backward(loss)
    assert x.grad.array.tolist() == [2.0, 4.0]


def test_leaf_gradients_accumulate():
    x = DiffNode.leaf(np.array([1.0, 2.0]), requires_grad=True)
    backward(sum_(x))
    backward(sum_(mul(x, 3.0)))
    assert x.grad.array.tolist() == [4.0, 4.0]


def test_constants_get_no_gradient():
    x = DiffNode.leaf(np.array([1.0]), requires_grad=True)
    c = DiffNode.constant(np.array([5.0]))
    backward(sum_(mul(x, c)))
    assert c.grad is None


def test_backward_needs_scalar():
    x = DiffNode.leaf(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(mul(x, 2.0))


def test_numpy_interop():
    x = DiffNode.leaf(np.array([0.5]), requires_grad=True)
    y = np.exp(x)
    assert isinstance(y, DiffNode)
    with pytest.raises(UnsupportedOpError):
        np.sin(x)
    with pytest.raises(UnsupportedOpError):
        np.sort(x)


def test_repeated_index_accumulates():
    leaf = DiffNode.leaf(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward(sum_(slice_(leaf, np.array([0, 0, 2]))))
    assert np.array_equal(leaf.grad.array, [2.0, 0.0, 1.0])

    x = np.random.default_rng(6).normal(size=(4, 3))
    check_gradient(lambda n: sum_(power(n[np.array([1, 1, 3]), 1:], 2)), x)
