import hashlib
import threading
from collections import OrderedDict
from typing import Generic, Hashable, TypeVar

import numpy as np

from .annotations import hex_str


class LcpException(Exception):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class ShapeError(LcpException): ...
class NonFiniteError(LcpException): ...
class UnsupportedOpError(LcpException): ...
class BackwardError(LcpException): ...
class DegenerateMaskError(LcpException): ...
class DegenerateDistributionError(LcpException): ...
class DegenerateCornerError(LcpException): ...
class GuidanceDivergenceError(LcpException): ...
class TrainingDivergenceError(LcpException): ...
class InputError(LcpException): ...
class VocabularyError(LcpException): ...
class GenerationRetryError(LcpException): ...
class ConfigError(LcpException): ...
class CheckpointError(LcpException): ...
class FreezeError(LcpException): ...


class ParseError(LcpException):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = 'line %s: %s' % (line, message)
        super().__init__(message)


# COLORS

class Color:
    @staticmethod
    def red() -> 'Color':
        return Color('ff0000')

    @staticmethod
    def green() -> 'Color':
        return Color('00ff00')

    @staticmethod
    def blue() -> 'Color':
        return Color('0000ff')

    @staticmethod
    def yellow() -> 'Color':
        return Color('ffff00')

    @staticmethod
    def magenta() -> 'Color':
        return Color('ff00ff')

    @staticmethod
    def cyan() -> 'Color':
        return Color('00ffff')

    @staticmethod
    def orange() -> 'Color':
        return Color('ff8000')

    @staticmethod
    def purple() -> 'Color':
        return Color('8000ff')

    @staticmethod
    def gray() -> 'Color':
        return Color('808080')

    def __init__(self, hex_str: hex_str) -> None:
        hex_str = hex_str.replace('#', '')
        hex_str = hex_str.lower()

        if len(hex_str) != 6:
            raise InputError('Invalid color: %s' % hex_str)
        self.hex_str = hex_str  # in this format: ffffff

    @property
    def channels(self) -> tuple[int, int, int]:
        return tuple(int(self.hex_str[i:i + 2], 16) for i in (0, 2, 4))

    @property
    def rgb(self) -> np.ndarray:
        # multiples of 1/255 survive an 8-bit PNG round trip exactly
        return np.array(self.channels, dtype=np.float64) / 255.0

    def tint(self, factor: float) -> 'Color':
        return Color(''.join('%02x' % int(round(c * factor)) for c in self.channels))

    def luminance(self) -> float:
        r, g, b = self.rgb
        return float(round((0.299 * r + 0.587 * g + 0.114 * b) * 255.0) / 255.0)

    def __str__(self) -> str:
        return self.hex_str

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Color) and other.hex_str == self.hex_str

    def __hash__(self) -> int:
        return hash(self.hex_str)


PALETTE: dict[str, Color] = {
    'red': Color.red(),
    'green': Color.green(),
    'blue': Color.blue(),
    'yellow': Color.yellow(),
    'magenta': Color.magenta(),
    'cyan': Color.cyan(),
    'orange': Color.orange(),
    'purple': Color.purple(),
}
BACKGROUND = Color.gray()
STRIPE_TINT = 0.85


def color_values(color: Color, channels: int) -> np.ndarray:
    """Pixel values of `color` for an image with `channels` channels (1 or 3)"""
    if channels == 3:
        return color.rgb
    if channels == 1:
        return np.array([color.luminance()])
    raise ShapeError('Unsupported channel count: %s' % channels)


# OTHER

def digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        h.update(str(array.dtype).encode())
        h.update(str(array.shape).encode())
        h.update(array.tobytes())
    return h.hexdigest()


V = TypeVar('V')


class LruCache(Generic[V]):
    """At most `size` entries; the least recently used one goes first"""

    def __init__(self, size: int) -> None:
        if size < 1:
            raise InputError('Cache size must be >= 1')
        self.size = size
        self.__items: OrderedDict[Hashable, V] = OrderedDict()
        self.__lock = threading.Lock()

    def get(self, key: Hashable) -> V | None:
        with self.__lock:
            if key not in self.__items:
                return None
            self.__items.move_to_end(key)
            return self.__items[key]

    def put(self, key: Hashable, value: V) -> None:
        with self.__lock:
            self.__items[key] = value
            self.__items.move_to_end(key)
            while len(self.__items) > self.size:
                self.__items.popitem(last=False)

    def clear(self) -> None:
        with self.__lock:
            self.__items.clear()

    def __contains__(self, key: Hashable) -> bool:
        return key in self.__items

    def __len__(self) -> int:
        return len(self.__items)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for `seed` and an optional sub-stream path"""
    return np.random.default_rng([seed, *stream])


def check_module(module: str):
    try:
        __import__(module)
    except ImportError:
        return False
    return True
