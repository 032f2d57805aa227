from abc import ABC as AbstractClass
from abc import abstractmethod as abstract_method
from typing import Any


class Object(AbstractClass):
    @abstract_method
    def eval(self) -> dict[str, Any]: ...


class Record(Object):
    """Object that can be rebuilt from the dict its `eval()` returns"""

    @staticmethod
    @abstract_method
    def from_dict(data: dict[str, Any]) -> 'Record': ...
