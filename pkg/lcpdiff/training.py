"""
Noise-prediction training for both stages.

`pretrain_step` fits the text-only backbone; `training_step` freezes it and
fits the adapter, resampler, refiner projection and grounding MLPs on
scene latents with their subject conditioning.
"""
from typing import Callable, Sequence

import numpy as np
from tqdm import tqdm

from .autodiff import DiffNode, backward, mean, power, scale, sub
from .config import TrainConfig
from .data import NULL_TOKEN, WORD_TO_ID, SceneAnnotation
from .denoiser import DenoiserParams, denoiser_forward, encode_text
from .diffusion import add_noise, image_to_latent
from .encoder import SubjectReference
from .enums import Stage
from .logs import get_logger
from .model import SubjectInput, encode_subjects, set_stage, subject_views
from .params import ParamStore, Weights
from .tensor import Tensor
from .utils import InputError, NonFiniteError, TrainingDivergenceError, make_rng

log = get_logger(__name__)


class AdamW:
    """Adam with decoupled weight decay; frozen parameters are never touched"""

    def __init__(
            self,
            lr: float = 5e-5,
            betas: tuple[float, float] = (0.9, 0.999),
            eps: float = 1e-8,
            weight_decay: float = 1e-2
        ) -> None:
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.__m: dict[str, np.ndarray] = {}
        self.__v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for param in store.trainable():
            if (grad := grads.get(param.name)) is None:
                continue
            m = self.__m.get(param.name, np.zeros_like(grad))
            v = self.__v.get(param.name, np.zeros_like(grad))
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            self.__m[param.name], self.__v[param.name] = m, v

            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            value = param.value * (1 - self.lr * self.weight_decay)
            store.update(param.name, value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def eval(self) -> dict[str, float]:
        return {'lr': self.lr, 'beta1': self.betas[0], 'beta2': self.betas[1], 'eps': self.eps, 'weight_decay': self.weight_decay, 't': self.t}


def optimizer_for(config: TrainConfig) -> AdamW:
    lr = config.backbone_lr if config.stage == Stage.BACKBONE else config.lr
    return AdamW(lr, weight_decay=config.weight_decay)


class TrainingExample:
    """A scene latent, its prompt and the subjects it personalises"""

    def __init__(self, z0: Tensor, prompt: list[int], references: list[tuple[SubjectReference, int]]) -> None:
        self.z0 = z0
        self.prompt = prompt
        self.references = references


def make_example(image: Tensor, annotation: SceneAnnotation) -> TrainingExample:
    """The scene itself, masked per subject, serves as each subject's reference"""
    references = []
    for subject in annotation.subjects:
        mask = Tensor.wrap(subject.mask(annotation.size).astype(np.float64))
        references.append((SubjectReference(image, mask, subject.entity_token, subject.box), subject.entity_index))
    return TrainingExample(image_to_latent(image), list(annotation.prompt), references)


def mse_loss(eps_pred: DiffNode, eps: Tensor) -> DiffNode:
    return mean(power(sub(eps_pred, eps), 2.0))


def _example_loss(
        example: TrainingExample,
        params: DenoiserParams,
        weights: Weights,
        config: TrainConfig,
        rng: np.random.Generator,
        stage: str
    ) -> DiffNode:
    schedule = params.schedule
    t = int(rng.integers(schedule.T))
    eps = Tensor.randn(rng, *example.z0.shape)
    z_t = add_noise(example.z0, t, eps, schedule)

    # prompt dropout; subject conditioning is kept in the adapter stage
    prompt = [WORD_TO_ID[NULL_TOKEN]] if rng.random() < config.text_dropout else example.prompt
    c_t = encode_text(prompt, weights)

    cond = None
    if stage == Stage.ADAPTER:
        subjects = []
        for reference, index in example.references:
            views = subject_views(
                reference,
                params.config.subject_patch,
                seed=int(rng.integers(2 ** 31)),
                frame_pair=bool(rng.random() < config.frame_pair_ratio),
                augment_images=config.augment_images
            )
            subjects.append(SubjectInput(reference, index, reference.box, views))
        cond = encode_subjects(subjects, params, weights)

    return mse_loss(denoiser_forward(z_t, t, c_t, cond, params, weights).eps, eps)


def _step(
        batch: Sequence[TrainingExample],
        params: DenoiserParams,
        optimizer: AdamW,
        config: TrainConfig,
        rng: np.random.Generator,
        stage: str
    ) -> float:
    if not batch:
        raise InputError('Empty training batch')
    weights = params.bind(track=True)
    total = 0.0
    try:
        for example in batch:
            loss = _example_loss(example, params, weights, config, rng, stage)
            if not np.isfinite(loss.item()):
                raise TrainingDivergenceError('Non-finite training loss')
            total += loss.item()
            backward(scale(loss, 1.0 / len(batch)))
    except NonFiniteError as e:
        raise TrainingDivergenceError('Training diverged: %s' % e) from e

    grads = {
        name: leaf.grad_array
        for name, leaf in weights.items()
        if leaf.requires_grad and leaf.grad_array is not None
    }
    optimizer.step(params.store, grads)
    return total / len(batch)


def training_step(batch: Sequence[TrainingExample], params: DenoiserParams, optimizer: AdamW, config: TrainConfig, rng: np.random.Generator) -> float:
    """One adapter-stage update; returns the batch mean loss"""
    return _step(batch, params, optimizer, config, rng, Stage.ADAPTER)


def pretrain_step(batch: Sequence[TrainingExample], params: DenoiserParams, optimizer: AdamW, config: TrainConfig, rng: np.random.Generator) -> float:
    """One text-only backbone update"""
    return _step(batch, params, optimizer, config, rng, Stage.BACKBONE)


def train(
        examples: Sequence[TrainingExample],
        params: DenoiserParams,
        config: TrainConfig,
        seed: int,
        on_checkpoint: Callable[[int, DenoiserParams], None] | None = None,
        progress: bool = True
    ) -> list[float]:
    """Run `config.steps` updates of `config.stage`; returns the per-step losses"""
    if not examples:
        raise InputError('No training examples')
    set_stage(params, config.stage)
    optimizer = optimizer_for(config)
    step_fn = pretrain_step if config.stage == Stage.BACKBONE else training_step
    rng = make_rng(seed, 4)
    size = min(config.batch, len(examples))

    losses = []
    for step in tqdm(range(config.steps), desc='train %s' % config.stage, disable=not progress):
        batch = [examples[i] for i in rng.choice(len(examples), size=size, replace=False)]
        losses.append(step_fn(batch, params, optimizer, config, rng))

        if config.log_every and (step + 1) % config.log_every == 0:
            recent = losses[-config.log_every:]
            log.debug('training', extra={'fields': {'step': step + 1, 'loss': sum(recent) / len(recent)}})
        if on_checkpoint is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            on_checkpoint(step + 1, params)
    return losses
