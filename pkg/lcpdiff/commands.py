import argparse
import json
import os
import sys
from inspect import _empty, getdoc, signature
from typing import Any, Callable, Sequence

from .config import DEFAULT_OUT, OUT_ENV, RunConfig, load_config, write_config
from .enums import ExitCode
from .interfaces import Object
from .logs import get_logger, setup_logging
from .utils import LcpException

log = get_logger(__name__)

SUMMARY_FILE = 'summary.json'
CONFIG_FILE = 'effective_config.toml'

# flag -> config key it overrides
COMMON_OVERRIDES = {
    'seed': 'seed',
    'eta': 'guidance.eta',
    'steps': 'sampler.steps',
    'guided_fraction': 'guidance.guided_fraction',
    'parallel': 'sampler.parallel'
}


class CommandOption:
    def __init__(self, name: str, type: type, required: bool = False, default: Any = None) -> None:
        self.name = name
        self.type = type
        self.required = required
        self.default = default

    @property
    def flag(self) -> str:
        return '--' + self.name.replace('_', '-')

    def add_to(self, parser: argparse.ArgumentParser) -> None:
        if self.required:
            parser.add_argument(self.name, type=self.type)
        elif self.type is bool:
            parser.add_argument(self.flag, dest=self.name, action='store_true')
        else:
            parser.add_argument(self.flag, dest=self.name, type=self.type, default=self.default)

    def eval(self) -> dict[str, Any]:
        return {
            'name': self.name,
            'type': self.type.__name__,
            'required': self.required
        }


class Command:
    def __init__(self, name: str, description: str, options: list[CommandOption], callback: Callable[..., Any]) -> None:
        self.name = name
        self.description = description
        self.options = options
        self.callback = callback

    def eval(self) -> dict[str, Any]:
        return {
            'name': self.name,
            'description': self.description,
            'options': [i.eval() for i in self.options]
        }


class Context(Object):
    """What every command receives first: the effective config and its output directory"""

    def __init__(self, command: str, config: RunConfig, out: str, debug: bool = False) -> None:
        self.command = command
        self.config = config
        self.out = out
        self.debug = debug

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def write_summary(self, summary: dict[str, Any]) -> dict[str, Any]:
        data = {'command': self.command, 'seed': self.config.seed, **summary}
        with open(self.path(SUMMARY_FILE), 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True)
        return data

    def eval(self) -> dict[str, Any]:
        return {'command': self.command, 'out': self.out, 'config': self.config.eval()}


def resolve_out(flag: str | None, config: RunConfig, command: str) -> str:
    """--out, then the config's `out`, then $LCPDIFF_OUT/<command>, then runs/<command>"""
    if flag:
        return flag
    if config.out:
        return config.out
    return os.path.join(os.environ.get(OUT_ENV) or DEFAULT_OUT, command)


def _annotation_type(annotation: Any) -> type:
    match annotation:
        case type() if annotation in (str, int, float, bool):
            return annotation
        case 'str' | 'int' | 'float' | 'bool':
            return {'str': str, 'int': int, 'float': float, 'bool': bool}[annotation]
        case _:
            return str


class App:
    def __init__(self, prog: str = 'lcpdiff') -> None:
        self.prog = prog
        self.commands: dict[str, Command] = {}

    def command(self):
        """Register a function as a subcommand

        Parameters after the context become arguments: those without a
        default are positional, the rest `--flags`. The first docstring line
        is the help text.
        """
        def wrapper(func_to_decorate: Callable[..., Any]):
            name = func_to_decorate.__name__.removeprefix('cmd_')
            description = (getdoc(func_to_decorate) or '...').splitlines()[0]
            options = []

            params = dict(signature(func_to_decorate).parameters)
            for op_name, param in list(params.items())[1:]:
                required = param.default == _empty
                options.append(CommandOption(op_name, _annotation_type(param.annotation), required, None if required else param.default))

            self.commands[name] = Command(name, description, options, func_to_decorate)
            return func_to_decorate
        return wrapper

    def parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog=self.prog)
        sub = parser.add_subparsers(dest='command', required=True)
        for command in self.commands.values():
            p = sub.add_parser(command.name, help=command.description, description=command.description)
            p.add_argument('--config', default=None, help='TOML run configuration')
            p.add_argument('--out', default=None, help='output directory')
            p.add_argument('--seed', type=int, default=None)
            p.add_argument('--eta', type=float, default=None)
            p.add_argument('--steps', type=int, default=None)
            p.add_argument('--guided-fraction', dest='guided_fraction', type=float, default=None)
            p.add_argument('--parallel', type=int, default=None)
            p.add_argument('--debug', action='store_true')
            for option in command.options:
                option.add_to(p)
        return parser

    def run(self, argv: Sequence[str] | None = None) -> int:
        args = vars(self.parser().parse_args(argv))
        setup_logging(args.pop('debug'))
        name = args.pop('command')
        command = self.commands[name]

        try:
            overrides = {key: args.pop(flag) for flag, key in COMMON_OVERRIDES.items()}
            config = load_config(args.pop('config'), **overrides)
            ctx = Context(name, config, resolve_out(args.pop('out'), config, name))
            os.makedirs(ctx.out, exist_ok=True)
            write_config(config, ctx.path(CONFIG_FILE))

            log.info('running', extra={'fields': {'command': name, 'out': ctx.out}})
            code = command.callback(ctx, **args)
        except LcpException as e:
            code = ExitCode.for_exception(e)
            print('%s: %s' % (type(e).__name__, e), file=sys.stderr)
        return ExitCode.OK if code is None else code
