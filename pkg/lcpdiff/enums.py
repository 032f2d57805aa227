from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .utils import LcpException


class ShapeKind:
    CIRCLE = 'circle'
    SQUARE = 'square'
    TRIANGLE = 'triangle'
    CROSS = 'cross'

    ALL = (CIRCLE, SQUARE, TRIANGLE, CROSS)


class Texture:
    SOLID = 'solid'
    STRIPED = 'striped'

    ALL = (SOLID, STRIPED)


class Projection:
    MAX = 'max'
    SUM = 'sum'

    ALL = (MAX, SUM)


class CornerNorm:
    CORNER = 'corner'  # count of corner-active columns / rows
    BOX = 'box'  # box side in cells

    ALL = (CORNER, BOX)


class Stage:
    BACKBONE = 'backbone'
    ADAPTER = 'adapter'

    ALL = (BACKBONE, ADAPTER)


class ParamGroup:
    TEXT = 'text'
    BACKBONE = 'backbone'
    ADAPTER = 'adapter'
    RESAMPLER = 'resampler'
    REFINER = 'refiner'
    GROUNDING = 'grounding'

    ALL = (TEXT, BACKBONE, ADAPTER, RESAMPLER, REFINER, GROUNDING)


class ExitCode:
    OK = 0
    ERROR = 1
    CONFIG = 2
    DATA = 3
    DIVERGENCE = 4
    GRADCHECK = 5

    @staticmethod
    def for_exception(error: 'LcpException') -> int:
        from .utils import (
            CheckpointError, ConfigError, GenerationRetryError, GuidanceDivergenceError,
            InputError, ParseError, TrainingDivergenceError, VocabularyError
        )

        match error:
            case ConfigError():
                return ExitCode.CONFIG
            case ParseError() | VocabularyError() | CheckpointError() | InputError() | GenerationRetryError():
                return ExitCode.DATA
            case GuidanceDivergenceError() | TrainingDivergenceError():
                return ExitCode.DIVERGENCE
            case _:
                return ExitCode.ERROR
