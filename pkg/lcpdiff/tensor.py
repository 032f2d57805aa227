"""
Dense 64-bit tensors and the non-differentiable numeric kernels shared by the
autodiff graph: row softmax, scaled dot-product attention and Fourier box
encoding.
"""
from typing import TYPE_CHECKING, Any, Callable, Iterable, Sequence

import numpy as np

from .utils import DegenerateMaskError, NonFiniteError, ShapeError

if TYPE_CHECKING:
    from .layout import BoundingBox


class Tensor:
    """Immutable row-major float64 array

    Every constructor checks finiteness, so a NaN or Inf can never be stored.
    """

    @staticmethod
    def zeros(*shape: int) -> 'Tensor':
        return Tensor.wrap(np.zeros(shape))

    @staticmethod
    def ones(*shape: int) -> 'Tensor':
        return Tensor.wrap(np.ones(shape))

    @staticmethod
    def randn(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> 'Tensor':
        return Tensor.wrap(rng.standard_normal(shape) * scale)

    @staticmethod
    def wrap(array: np.ndarray) -> 'Tensor':
        """Adopt `array` without copying; the caller gives up ownership"""
        tensor = Tensor.__new__(Tensor)
        tensor.__init_array(np.asarray(array, dtype=np.float64))
        return tensor

    def __init__(self, data: Any, shape: Sequence[int] | None = None) -> None:
        array = np.array(data, dtype=np.float64)
        if shape is not None:
            if int(np.prod(shape)) != array.size:
                raise ShapeError('Cannot view %s values as shape %s' % (array.size, list(shape)))
            array = array.reshape(shape)
        self.__init_array(array)

    def __init_array(self, array: np.ndarray) -> None:
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError('Tensor dimensions must be positive, got %s' % list(array.shape))
        if not np.all(np.isfinite(array)):
            raise NonFiniteError('Tensor contains NaN or Inf values')
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        array.setflags(write=False)
        self.__array = array

    @property
    def array(self) -> np.ndarray:
        return self.__array

    @property
    def shape(self) -> list[int]:
        return list(self.__array.shape)

    @property
    def data(self) -> np.ndarray:
        return self.__array.reshape(-1)

    @property
    def rank(self) -> int:
        return self.__array.ndim

    def item(self) -> float:
        if self.__array.size != 1:
            raise ShapeError('item() needs a single value, shape is %s' % self.shape)
        return float(self.__array.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def reshape(self, *shape: int) -> 'Tensor':
        return Tensor(self.__array, shape)

    def tolist(self) -> Any:
        return self.__array.tolist()

    def eval(self) -> dict[str, Any]:
        return {
            'shape': self.shape,
            'data': self.data.tolist()
        }

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Tensor) and np.array_equal(self.__array, other.array)

    def __hash__(self) -> int:
        return hash(self.__array.tobytes())

    def __len__(self) -> int:
        return self.__array.shape[0] if self.__array.ndim else 1

    def __repr__(self) -> str:
        return f'Tensor(shape={self.shape})'


def as_array(value: 'Tensor | np.ndarray | Iterable[float] | float') -> np.ndarray:
    if isinstance(value, Tensor):
        return value.array
    return np.asarray(value, dtype=np.float64)


# KERNELS

def log_mask(mask: np.ndarray) -> np.ndarray:
    """{0,1} mask to an additive 0 / -inf bias; rejects rows without a 1"""
    mask = np.asarray(mask)
    if mask.ndim >= 1 and np.any(~np.any(mask != 0, axis=-1)):
        raise DegenerateMaskError('Attention mask has a row with no unmasked position')
    return np.where(mask != 0, 0.0, -np.inf)


def softmax_kernel(scores: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    if bias is not None:
        scores = scores + bias
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows(t: Tensor) -> Tensor:
    if t.rank != 2:
        raise ShapeError('softmax_rows expects a rank-2 tensor, got shape %s' % t.shape)
    return Tensor.wrap(softmax_kernel(t.array))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
    if q.rank != 2 or k.rank != 2 or v.rank != 2:
        raise ShapeError('Attention operands must be rank-2')
    if q.shape[1] != k.shape[1]:
        raise ShapeError('Query dim %s does not match key dim %s' % (q.shape[1], k.shape[1]))
    if k.shape[0] != v.shape[0]:
        raise ShapeError('Key count %s does not match value count %s' % (k.shape[0], v.shape[0]))

    bias = None
    if mask is not None:
        if mask.shape != [q.shape[0], k.shape[0]]:
            raise ShapeError('Mask shape %s, expected %s' % (mask.shape, [q.shape[0], k.shape[0]]))
        if not np.all((mask.array == 0) | (mask.array == 1)):
            raise ShapeError('Attention mask must be {0,1}-valued')
        bias = log_mask(mask.array)

    scores = q.array @ k.array.T / np.sqrt(q.shape[1])
    attn = softmax_kernel(scores, bias)
    return Tensor.wrap(attn @ v.array), Tensor.wrap(attn)


# FOURIER BOX ENCODING

class FourierSpec:
    def __init__(self, num_frequencies: int = 8) -> None:
        if num_frequencies <= 0:
            raise ShapeError('num_frequencies must be positive')
        self.num_frequencies = num_frequencies

    @property
    def frequencies(self) -> np.ndarray:
        return 2.0 ** np.arange(self.num_frequencies)

    @property
    def dim(self) -> int:
        return 4 * 2 * self.num_frequencies

    def eval(self) -> dict[str, Any]:
        return {'num_frequencies': self.num_frequencies}


def fourier_encode_box(b: 'BoundingBox', spec: FourierSpec) -> Tensor:
    angles = 2.0 * np.pi * spec.frequencies
    out = []
    for c in b.coords:
        for a in angles:
            out.append(np.sin(a * c))
            out.append(np.cos(a * c))
    return Tensor.wrap(np.array(out))


# GRADIENT ORACLE

def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ShapeError('eps must be positive')
    base = x.array.reshape(-1)
    grad = np.zeros_like(base)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += eps
        minus[i] -= eps
        hi = f(Tensor.wrap(plus.reshape(x.shape)))
        lo = f(Tensor.wrap(minus.reshape(x.shape)))
        grad[i] = (float(hi) - float(lo)) / (2.0 * eps)
    return Tensor.wrap(grad.reshape(x.shape))


def relative_error(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)"""
    a, b = as_array(a), as_array(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
