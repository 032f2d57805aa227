"""
Reverse-mode differentiation over `Tensor` values.

Only the operators the denoiser, the encoders and the layout losses need are
provided. Numpy functions applied to a `DiffNode` either map onto one of them
or raise `UnsupportedOpError`; nothing is ever silently detached.
"""
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .tensor import Tensor, as_array, log_mask, softmax_kernel
from .utils import BackwardError, ShapeError, UnsupportedOpError

Vjp = Callable[[np.ndarray], np.ndarray]
Operand = 'DiffNode | Tensor | np.ndarray | float'

GELU_C = np.sqrt(2.0 / np.pi)


class DiffNode:
    @staticmethod
    def leaf(value: 'Tensor | np.ndarray | float', requires_grad: bool = False) -> 'DiffNode':
        return DiffNode(value, requires_grad=requires_grad)

    @staticmethod
    def constant(value: 'Tensor | np.ndarray | float') -> 'DiffNode':
        return DiffNode(value)

    def __init__(
            self,
            value: 'Tensor | np.ndarray | float',
            parents: Sequence[tuple['DiffNode', Vjp]] = (),
            op: str = 'leaf',
            requires_grad: bool = False
        ) -> None:
        self.value: Tensor = value if isinstance(value, Tensor) else Tensor.wrap(np.array(value, dtype=np.float64))
        self.parents: tuple[tuple[DiffNode, Vjp], ...] = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or bool(self.parents)

        self.__grad: np.ndarray | None = None
        self.__consumed = False

    @property
    def array(self) -> np.ndarray:
        return self.value.array

    @property
    def shape(self) -> list[int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    @property
    def grad(self) -> Tensor | None:
        return Tensor.wrap(self.__grad) if self.__grad is not None else None

    @property
    def grad_array(self) -> np.ndarray | None:
        return self.__grad

    def _accumulate(self, grad: np.ndarray) -> None:
        self.__grad = grad if self.__grad is None else self.__grad + grad

    def _set_grad(self, grad: np.ndarray) -> None:
        self.__grad = grad

    def _consume(self) -> None:
        if self.__consumed:
            raise BackwardError('backward() already ran on this graph; call reset() first')
        self.__consumed = True

    def reset(self) -> None:
        """Clear gradients and the consumed flag over the whole graph"""
        for node in _topological(self):
            node.__grad = None
            node.__consumed = False

    def item(self) -> float:
        return self.value.item()

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f'DiffNode(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})'

    # operators

    def __add__(self, other: Operand) -> 'DiffNode':
        return add(self, other)

    def __radd__(self, other: Operand) -> 'DiffNode':
        return add(other, self)

    def __sub__(self, other: Operand) -> 'DiffNode':
        return sub(self, other)

    def __rsub__(self, other: Operand) -> 'DiffNode':
        return sub(other, self)

    def __mul__(self, other: Operand) -> 'DiffNode':
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'DiffNode':
        return mul(other, self)

    def __matmul__(self, other: Operand) -> 'DiffNode':
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> 'DiffNode':
        return matmul(other, self)

    def __neg__(self) -> 'DiffNode':
        return scale(self, -1.0)

    def __truediv__(self, other: Operand) -> 'DiffNode':
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __pow__(self, p: float) -> 'DiffNode':
        return power(self, p)

    def __getitem__(self, key: Any) -> 'DiffNode':
        return slice_(self, key)

    @property
    def T(self) -> 'DiffNode':
        return transpose(self)

    # numpy interop

    def __array__(self, *args, **kwargs):
        raise UnsupportedOpError('Converting a DiffNode to an ndarray would detach it; use .array')

    def __array_ufunc__(self, ufunc: np.ufunc, method: str, *inputs: Any, **kwargs: Any) -> 'DiffNode':
        if method != '__call__' or kwargs:
            raise UnsupportedOpError('Unsupported numpy call on DiffNode: %s.%s' % (ufunc.__name__, method))
        unary = {
            'exp': exp, 'log': log, 'tanh': tanh,
            'absolute': abs_, 'negative': lambda a: scale(a, -1.0)
        }
        binary = {
            'add': add, 'subtract': sub, 'multiply': mul, 'matmul': matmul
        }
        if ufunc.__name__ in unary and len(inputs) == 1:
            return unary[ufunc.__name__](inputs[0])
        if ufunc.__name__ in binary and len(inputs) == 2:
            return binary[ufunc.__name__](*inputs)
        raise UnsupportedOpError('Unsupported operation on DiffNode: %s' % ufunc.__name__)

    def __array_function__(self, func: Any, types: Any, args: Any, kwargs: Any) -> Any:
        raise UnsupportedOpError('Unsupported operation on DiffNode: np.%s' % func.__name__)


def node(x: Operand) -> DiffNode:
    return x if isinstance(x, DiffNode) else DiffNode.constant(as_array(x))


def _make(op: str, value: np.ndarray, parents: Iterable[tuple[DiffNode, Vjp]]) -> DiffNode:
    tracked = [(p, vjp) for p, vjp in parents if p.requires_grad]
    return DiffNode(Tensor.wrap(value), tracked, op=op)


def _unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological(root: DiffNode) -> list[DiffNode]:
    order: list[DiffNode] = []
    visited: set[int] = set()
    stack: list[tuple[DiffNode, bool]] = [(root, False)]
    while stack:
        current, expanded = stack.pop()
        if expanded:
            order.append(current)
            continue
        if id(current) in visited:
            continue
        visited.add(id(current))
        stack.append((current, True))
        for parent, _ in current.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: DiffNode) -> dict[DiffNode, Tensor]:
    """Populate `.grad` on every node that requires it; returns leaf gradients

    Leaf gradients accumulate across calls until `reset()`, so one set of
    parameter leaves can collect a batch of per-sample graphs.
    """
    if loss.value.array.size != 1:
        raise ShapeError('backward() needs a scalar loss, got shape %s' % loss.shape)
    loss._consume()

    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.array)}

    leaves: dict[DiffNode, Tensor] = {}
    for current in reversed(order):
        grad = grads.pop(id(current), None)
        if grad is None:
            continue
        if current.is_leaf:
            if current.requires_grad:
                current._accumulate(grad)
                leaves[current] = current.grad
            continue
        current._set_grad(grad)
        for parent, vjp in current.parents:
            local = vjp(grad)
            key = id(parent)
            grads[key] = local if key not in grads else grads[key] + local
    return leaves


# OPERATIONS

def add(a: Operand, b: Operand) -> DiffNode:
    a, b = node(a), node(b)
    return _make('add', a.array + b.array, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape))
    ])


def sub(a: Operand, b: Operand) -> DiffNode:
    a, b = node(a), node(b)
    return _make('sub', a.array - b.array, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape))
    ])


def mul(a: Operand, b: Operand) -> DiffNode:
    a, b = node(a), node(b)
    return _make('mul', a.array * b.array, [
        (a, lambda g: _unbroadcast(g * b.array, a.shape)),
        (b, lambda g: _unbroadcast(g * a.array, b.shape))
    ])


def scale(a: Operand, s: float) -> DiffNode:
    a = node(a)
    return _make('scale', a.array * s, [(a, lambda g: g * s)])


def matmul(a: Operand, b: Operand) -> DiffNode:
    a, b = node(a), node(b)
    if a.value.rank != 2 or b.value.rank != 2:
        raise ShapeError('matmul expects rank-2 operands, got %s and %s' % (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise ShapeError('matmul inner dimensions differ: %s vs %s' % (a.shape, b.shape))
    return _make('matmul', a.array @ b.array, [
        (a, lambda g: g @ b.array.T),
        (b, lambda g: a.array.T @ g)
    ])


def transpose(a: Operand) -> DiffNode:
    a = node(a)
    if a.value.rank != 2:
        raise ShapeError('transpose expects a rank-2 operand')
    return _make('transpose', a.array.T.copy(), [(a, lambda g: g.T)])


def sum_(a: Operand, axis: int | None = None, keepdims: bool = False) -> DiffNode:
    a = node(a)
    value = np.sum(a.array, axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _make('sum', np.asarray(value), [(a, vjp)])


def mean(a: Operand, axis: int | None = None, keepdims: bool = False) -> DiffNode:
    a = node(a)
    count = a.value.array.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a: Operand, shape: Sequence[int]) -> DiffNode:
    a = node(a)
    if int(np.prod(shape)) != a.value.array.size:
        raise ShapeError('Cannot reshape %s into %s' % (a.shape, list(shape)))
    return _make('reshape', a.array.reshape(shape).copy(), [(a, lambda g: g.reshape(a.shape))])


def slice_(a: Operand, key: Any) -> DiffNode:
    a = node(a)

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros(a.shape)
        np.add.at(out, key, g)
        return out

    return _make('slice', np.array(a.array[key]), [(a, vjp)])


def take(a: Operand, index: np.ndarray) -> DiffNode:
    """Gather from the flattened operand; output has `index.shape`"""
    a = node(a)
    index = np.asarray(index, dtype=np.intp)

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros(a.value.array.size)
        np.add.at(out, index.reshape(-1), g.reshape(-1))
        return out.reshape(a.shape)

    return _make('take', a.array.reshape(-1)[index], [(a, vjp)])


def concat(nodes: Sequence[Operand], axis: int = 0) -> DiffNode:
    nodes = [node(n) for n in nodes]
    if not nodes:
        raise ShapeError('concat needs at least one operand')
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0, *sizes])

    def vjp_for(i: int) -> Vjp:
        def vjp(g: np.ndarray) -> np.ndarray:
            key = [slice(None)] * g.ndim
            key[axis] = slice(bounds[i], bounds[i + 1])
            return g[tuple(key)]
        return vjp

    value = np.concatenate([n.array for n in nodes], axis=axis)
    return _make('concat', value, [(n, vjp_for(i)) for i, n in enumerate(nodes)])


def softmax(a: Operand, mask: np.ndarray | None = None) -> DiffNode:
    """Softmax over the last axis with an optional {0,1} mask (additive -inf)"""
    a = node(a)
    bias = log_mask(mask) if mask is not None else None
    s = softmax_kernel(a.array, bias)

    def vjp(g: np.ndarray) -> np.ndarray:
        return s * (g - np.sum(g * s, axis=-1, keepdims=True))

    return _make('softmax', s, [(a, vjp)])


def gelu(a: Operand) -> DiffNode:
    a = node(a)
    x = a.array
    inner = GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)

    def vjp(g: np.ndarray) -> np.ndarray:
        d_inner = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner)

    return _make('gelu', 0.5 * x * (1.0 + th), [(a, vjp)])


def tanh(a: Operand) -> DiffNode:
    a = node(a)
    th = np.tanh(a.array)
    return _make('tanh', th, [(a, lambda g: g * (1.0 - th ** 2))])


def exp(a: Operand) -> DiffNode:
    a = node(a)
    e = np.exp(a.array)
    return _make('exp', e, [(a, lambda g: g * e)])


def log(a: Operand) -> DiffNode:
    a = node(a)
    x = a.array
    return _make('log', np.log(x), [(a, lambda g: g / x)])


def power(a: Operand, p: float) -> DiffNode:
    a = node(a)
    x = a.array
    return _make('power', x ** p, [(a, lambda g: g * p * x ** (p - 1.0))])


def abs_(a: Operand) -> DiffNode:
    a = node(a)
    x = a.array
    return _make('abs', np.abs(x), [(a, lambda g: g * np.sign(x))])


# COMPOSITES

def linear(x: Operand, w: Operand, b: 'Operand | None' = None) -> DiffNode:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def layer_norm(x: Operand, gain: Operand, bias: Operand, eps: float = 1e-5) -> DiffNode:
    x = node(x)
    centered = sub(x, mean(x, axis=-1, keepdims=True))
    var = mean(power(centered, 2.0), axis=-1, keepdims=True)
    normed = mul(centered, power(add(var, eps), -0.5))
    return add(mul(normed, gain), bias)


def logsumexp_max(a: Operand, axis: int, temperature: float) -> DiffNode:
    """Smooth maximum temperature * log(sum(exp(a / temperature))) along `axis`"""
    a = node(a)
    shift = np.max(a.array, axis=axis, keepdims=True)
    z = scale(sub(a, shift), 1.0 / temperature)
    out = scale(log(sum_(exp(z), axis=axis, keepdims=True)), temperature)
    out = add(out, shift)
    return reshape(out, [d for i, d in enumerate(a.shape) if i != axis % a.value.rank])


def hard_max(a: Operand, axis: int) -> DiffNode:
    """Exact maximum along `axis`; the gradient goes to the first arg-max"""
    a = node(a)
    arr = a.array
    if arr.ndim != 2:
        raise ShapeError('hard_max expects a rank-2 operand')
    rows, cols = arr.shape
    if axis == 0:
        index = np.argmax(arr, axis=0) * cols + np.arange(cols)
    else:
        index = np.arange(rows) * cols + np.argmax(arr, axis=1)
    return take(a, index)
