import logging
import sys
from typing import Any

from .utils import check_module

ROOT_LOGGER = 'lcpdiff'


class ColorFormatter(logging.Formatter):
    """Level tag and structured fields in colour, plain text without colorama

    Extra fields are passed through `extra={'fields': {...}}` and printed as
    `key:value` pairs after the message.
    """

    def __init__(self, colored: bool | None = None) -> None:
        super().__init__()
        self.colored = check_module('colorama') if colored is None else colored
        if self.colored:
            import colorama
            colorama.just_fix_windows_console()

    def __field(self, key: str, value: Any) -> str:
        if isinstance(value, float):
            value = '%.6g' % value
        if not self.colored:
            return f'{key}:{value}'

        import colorama

        match key:
            case 'step' | 't' | 'op':
                color = colorama.Fore.GREEN
            case 'loss' | 'loss_pos' | 'loss_scale' | 'error':
                color = colorama.Fore.RED
            case 'event' | 'command':
                color = colorama.Fore.MAGENTA
            case _:
                color = colorama.Fore.BLUE
        return f'{color}{key}:{value}{colorama.Fore.RESET}'

    def format(self, record: logging.LogRecord) -> str:
        if self.colored:
            import colorama
            x = f'{colorama.Fore.YELLOW}{record.levelname} {colorama.Fore.RESET}{record.name}: '
        else:
            x = f'{record.levelname} {record.name}: '
        x += record.getMessage()

        fields: dict[str, Any] = getattr(record, 'fields', None) or {}
        if fields:
            x += ' ' + ' '.join(self.__field(k, v) for k, v in fields.items())
        if record.exc_info:
            x += '\n' + self.formatException(record.exc_info)
        return x


def get_logger(name: str) -> logging.Logger:
    if not name.startswith(ROOT_LOGGER):
        name = f'{ROOT_LOGGER}.{name}'
    return logging.getLogger(name)


def setup_logging(debug: bool = False, colored: bool | None = None) -> logging.Logger:
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(logging.DEBUG if debug else logging.INFO)

    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ColorFormatter(colored))
    logger.addHandler(handler)
    logger.propagate = False
    return logger
