import dataclasses
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from typing import Any

import tomli_w
from typing_extensions import Self

from .enums import CornerNorm, Projection, Stage
from .utils import ConfigError

CHECKPOINT_VERSION = 1
REPORT_VERSION = 1
DATASET_VERSION = 1

OUT_ENV = 'LCPDIFF_OUT'
DEFAULT_OUT = 'runs'
DEFAULT_SEED = 0
REFINER_CACHE_SIZE = 64


class ConfigMixin:
    """`eval()` to a plain dict and strict `from_dict` for config dataclasses"""

    def eval(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ConfigMixin):
                value = value.eval()
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> Self:
        data = dict(data or {})
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError('Unknown key(s) in [%s]: %s' % (cls.section, ', '.join(unknown)))

        kwargs = {}
        for name, value in data.items():
            default = getattr(cls(), name)
            if isinstance(default, ConfigMixin):
                if not isinstance(value, dict):
                    raise ConfigError('[%s] must be a table' % default.section)
                value = type(default).from_dict(value)
            elif isinstance(default, tuple) and isinstance(value, list):
                value = tuple(value)
            elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, type(default)) or isinstance(value, bool) != isinstance(default, bool):
                raise ConfigError('%s.%s must be %s, got %r' % (cls.section, name, type(default).__name__, value))
            kwargs[name] = value
        try:
            config = cls(**kwargs)
            config.validate()
        except TypeError as e:
            raise ConfigError('Invalid value in [%s]: %s' % (cls.section, e)) from e
        return config

    def replace(self, **changes: Any) -> Self:
        config = dataclasses.replace(self, **changes)
        config.validate()
        return config

    def validate(self) -> None: ...


@dataclass(frozen=True)
class ScheduleConfig(ConfigMixin):
    section = 'schedule'

    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError('schedule.steps must be >= 1')
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError('schedule needs 0 < beta_start <= beta_end < 1')


@dataclass(frozen=True)
class ModelConfig(ConfigMixin):
    section = 'model'

    image_size: int = 32
    channels: int = 3
    patch: int = 2
    dim: int = 64
    ffn_mult: int = 2
    max_prompt: int = 16
    num_queries: int = 16
    resampler_depth: int = 4
    subject_patch: int = 4
    fourier_frequencies: int = 8
    grounding_hidden: int = 128
    refiner_timestep: float = 0.1
    refiner_blocks: tuple[int, ...] = ()  # empty = every block
    alpha: float = 1.0
    beta: float = 1.0
    lambda_: float = 1.0
    use_static_refiner: bool = True
    use_grounding: bool = True
    init_scale: float = 0.02
    seed: int = 0

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def levels(self) -> tuple[int, int]:
        return self.grid, self.grid // 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def subject_patch_dim(self) -> int:
        return self.channels * self.subject_patch * self.subject_patch

    def validate(self) -> None:
        if self.channels not in (1, 3):
            raise ConfigError('model.channels must be 1 or 3')
        if self.image_size % (2 * self.patch):
            raise ConfigError('model.image_size must be divisible by 2 * model.patch')
        if self.grid < 4:
            raise ConfigError('model grid (image_size / patch) must be >= 4')
        if self.image_size % self.subject_patch:
            raise ConfigError('model.subject_patch must divide model.image_size')
        for name in ('alpha', 'beta', 'lambda_'):
            if not 0.0 <= getattr(self, name) <= 4.0:
                raise ConfigError('model.%s must lie in [0, 4]' % name)
        if not 0.0 < self.refiner_timestep < 1.0:
            raise ConfigError('model.refiner_timestep must lie in (0, 1)')
        if any(not 0 <= b < 3 for b in self.refiner_blocks):
            raise ConfigError('model.refiner_blocks entries must be block indices 0..2')


@dataclass(frozen=True)
class GuidanceConfig(ConfigMixin):
    section = 'guidance'

    eta: float = 10.0
    alpha0: float = 1.0
    guided_fraction: float = 0.5
    corner_ratio: float = 0.25
    loss_layers: tuple[int, ...] = ()  # empty = every block
    projection: str = Projection.MAX
    smooth: bool = True
    temperature: float = 0.01
    corner_norm: str = CornerNorm.CORNER
    iterations: int = 1
    recompute: bool = True
    enabled: bool = True

    def validate(self) -> None:
        if self.eta < 0:
            raise ConfigError('guidance.eta must be >= 0')
        if self.alpha0 <= 0:
            raise ConfigError('guidance.alpha0 must be > 0')
        if not 0.0 < self.guided_fraction <= 1.0:
            raise ConfigError('guidance.guided_fraction must lie in (0, 1]')
        if not 0.0 < self.corner_ratio <= 0.5:
            raise ConfigError('guidance.corner_ratio must lie in (0, 0.5]')
        if self.projection not in Projection.ALL:
            raise ConfigError('guidance.projection must be one of %s' % ', '.join(Projection.ALL))
        if self.corner_norm not in CornerNorm.ALL:
            raise ConfigError('guidance.corner_norm must be one of %s' % ', '.join(CornerNorm.ALL))
        if self.temperature <= 0:
            raise ConfigError('guidance.temperature must be > 0')
        if self.iterations < 1:
            raise ConfigError('guidance.iterations must be >= 1')
        if any(not 0 <= b < 3 for b in self.loss_layers):
            raise ConfigError('guidance.loss_layers entries must be block indices 0..2')


@dataclass(frozen=True)
class SamplerConfig(ConfigMixin):
    section = 'sampler'

    steps: int = 50
    cfg_scale: float = 7.5
    parallel: int = 1

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError('sampler.steps must be >= 1')
        if self.cfg_scale < 1.0:
            raise ConfigError('sampler.cfg_scale must be >= 1')
        if self.parallel < 1:
            raise ConfigError('sampler.parallel must be >= 1')


@dataclass(frozen=True)
class DatasetConfig(ConfigMixin):
    section = 'dataset'

    train: int = 2000
    eval_scenes: int = 200
    requests: int = 100
    min_subjects: int = 1
    max_subjects: int = 3
    size_min: float = 0.15
    size_max: float = 0.45
    max_iou: float = 0.1
    max_attempts: int = 100
    striped_ratio: float = 0.3

    def validate(self) -> None:
        if not 1 <= self.min_subjects <= self.max_subjects <= 3:
            raise ConfigError('dataset needs 1 <= min_subjects <= max_subjects <= 3')
        if not 0.15 <= self.size_min <= self.size_max <= 0.45:
            raise ConfigError('dataset sizes must lie in [0.15, 0.45]')
        if self.train < 0 or self.eval_scenes < 0 or self.requests < 0:
            raise ConfigError('dataset counts must be >= 0')


@dataclass(frozen=True)
class TrainConfig(ConfigMixin):
    section = 'train'

    stage: str = Stage.ADAPTER
    steps: int = 2000
    batch: int = 32
    lr: float = 5e-5
    backbone_lr: float = 1e-3
    weight_decay: float = 1e-2
    text_dropout: float = 0.1
    frame_pair_ratio: float = 0.7
    augment_images: bool = True
    log_every: int = 50
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.stage not in Stage.ALL:
            raise ConfigError('train.stage must be one of %s' % ', '.join(Stage.ALL))
        if self.steps < 0 or self.batch < 1:
            raise ConfigError('train needs steps >= 0 and batch >= 1')
        if not 0.0 <= self.text_dropout < 1.0 or not 0.0 <= self.frame_pair_ratio <= 1.0:
            raise ConfigError('train ratios must lie in [0, 1]')


@dataclass(frozen=True)
class EvalConfig(ConfigMixin):
    section = 'evaluation'

    thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    min_blob: int = 9
    contact_columns: int = 8
    contact_scale: int = 4

    def validate(self) -> None:
        if not self.thresholds or any(not 0.0 < t <= 1.0 for t in self.thresholds):
            raise ConfigError('evaluation.thresholds must be IoU values in (0, 1]')
        if self.min_blob < 1 or self.contact_columns < 1 or self.contact_scale < 1:
            raise ConfigError('evaluation sizes must be >= 1')


@dataclass(frozen=True)
class RunConfig(ConfigMixin):
    section = 'run'

    seed: int = DEFAULT_SEED
    out: str = ''
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)


def load_config(path: str | None = None, **overrides: Any) -> RunConfig:
    """Defaults, then the TOML file at `path`, then non-None `overrides`

    Override keys are dotted paths such as `guidance.eta` or plain top-level
    names such as `seed`.
    """
    data: dict[str, Any] = {}
    if path:
        try:
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        except OSError as e:
            raise ConfigError('Cannot read config %s: %s' % (path, e)) from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError('Malformed config %s: %s' % (path, e)) from e

    for key, value in overrides.items():
        if value is None:
            continue
        *sections, name = key.split('.')
        target = data
        for section in sections:
            target = target.setdefault(section, {})
            if not isinstance(target, dict):
                raise ConfigError('[%s] must be a table' % section)
        target[name] = value
    return RunConfig.from_dict(data)


def write_config(config: RunConfig, path: str) -> None:
    with open(path, 'wb') as f:
        tomli_w.dump(config.eval(), f)
