from typing import Any, Iterator

import numpy as np

from .autodiff import DiffNode
from .enums import ParamGroup
from .utils import FreezeError, NonFiniteError, digest


class Parameter:
    def __init__(self, name: str, value: np.ndarray, group: str, trainable: bool = False) -> None:
        self.name = name
        self.group = group
        self.trainable = trainable
        self.value = np.array(value, dtype=np.float64)

    def eval(self) -> dict[str, Any]:
        return {
            'name': self.name,
            'group': self.group,
            'trainable': self.trainable,
            'shape': list(self.value.shape),
            'sha256': digest(self.value)
        }

    def __repr__(self) -> str:
        return f'Parameter({self.name}, shape={list(self.value.shape)}, trainable={self.trainable})'


class Weights(dict[str, DiffNode]):
    """Parameter leaves bound for one forward pass"""

    def scope(self, prefix: str) -> 'Weights':
        prefix = prefix.rstrip('.') + '.'
        return Weights({k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)})


class ParamStore:
    def __init__(self) -> None:
        self.__params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray, group: str, trainable: bool = False) -> Parameter:
        if name in self.__params:
            raise KeyError('Duplicate parameter: %s' % name)
        if group not in ParamGroup.ALL:
            raise KeyError('Unknown parameter group: %s' % group)
        param = Parameter(name, value, group, trainable)
        self.__params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self.__params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.__params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.__params[k] for k in sorted(self.__params))

    def __len__(self) -> int:
        return len(self.__params)

    @property
    def names(self) -> list[str]:
        return sorted(self.__params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self if p.trainable]

    def frozen(self) -> list[Parameter]:
        return [p for p in self if not p.trainable]

    def set_trainable(self, groups: tuple[str, ...]) -> None:
        """Make exactly the parameters of `groups` trainable"""
        for param in self:
            param.trainable = param.group in groups

    def bind(self, track: bool = False) -> Weights:
        """Fresh leaves for a forward pass; trainable ones require grad when tracking"""
        return Weights({
            p.name: DiffNode.leaf(p.value, requires_grad=track and p.trainable)
            for p in self
        })

    def update(self, name: str, value: np.ndarray) -> None:
        param = self.__params[name]
        if not param.trainable:
            raise FreezeError('Parameter %s is frozen' % name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != param.value.shape:
            raise FreezeError('Shape change for %s: %s -> %s' % (name, param.value.shape, value.shape))
        if not np.all(np.isfinite(value)):
            raise NonFiniteError('Non-finite update for %s' % name)
        param.value = value

    def frozen_hash(self) -> str:
        frozen = self.frozen()
        return digest(*[np.frombuffer(p.name.encode(), dtype=np.uint8) for p in frozen], *[p.value for p in frozen])

    def content_hash(self) -> str:
        params = list(self)
        return digest(*[np.frombuffer(p.name.encode(), dtype=np.uint8) for p in params], *[p.value for p in params])

    def copy(self) -> 'ParamStore':
        out = ParamStore()
        for p in self:
            out.add(p.name, p.value.copy(), p.group, p.trainable)
        return out


class Initializer:
    """Seeded parameter factory; every tensor draws from its own named stream"""

    def __init__(self, store: ParamStore, seed: int, scale: float = 0.02) -> None:
        self.store = store
        self.seed = seed
        self.scale = scale

    def __rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, *name.encode()])

    def normal(self, name: str, shape: tuple[int, ...], group: str, scale: float | None = None) -> Parameter:
        scale = self.scale if scale is None else scale
        return self.store.add(name, self.__rng(name).standard_normal(shape) * scale, group)

    def xavier(self, name: str, shape: tuple[int, int], group: str, gain: float = 1.0) -> Parameter:
        limit = gain * np.sqrt(6.0 / (shape[0] + shape[1]))
        return self.store.add(name, self.__rng(name).uniform(-limit, limit, shape), group)

    def zeros(self, name: str, shape: tuple[int, ...], group: str) -> Parameter:
        return self.store.add(name, np.zeros(shape), group)

    def ones(self, name: str, shape: tuple[int, ...], group: str) -> Parameter:
        return self.store.add(name, np.ones(shape), group)

    def constant(self, name: str, value: np.ndarray | float, group: str) -> Parameter:
        return self.store.add(name, np.array(value, dtype=np.float64), group)
