"""
Parameter construction, the freeze split of the two training stages and the
assembly of subject conditioning shared by training and sampling.
"""
from typing import Sequence

import numpy as np

from .annotations import seed, token_index
from .autodiff import DiffNode, concat, mean
from .config import ModelConfig, RunConfig, ScheduleConfig
from .data import VOCABULARY
from .denoiser import Conditioning, DenoiserParams, init_backbone, init_text, word_embedding
from .diffusion import schedule_from_config
from .encoder import (
    ResamplerParams, SubjectReference, augment, encode_dynamic, init_refiner, init_resampler, make_frame_pair,
    patchify, refine_static
)
from .enums import ParamGroup, Stage
from .layout import BoundingBox, build_grounding_tokens, init_grounding
from .logs import get_logger
from .params import Initializer, ParamStore, Weights
from .tensor import FourierSpec, Tensor
from .utils import InputError

log = get_logger(__name__)

STAGE_GROUPS = {
    Stage.BACKBONE: (ParamGroup.BACKBONE,),
    Stage.ADAPTER: (ParamGroup.ADAPTER, ParamGroup.RESAMPLER, ParamGroup.REFINER, ParamGroup.GROUNDING)
}


def build_params(model: ModelConfig, schedule: ScheduleConfig, stage: str = Stage.ADAPTER) -> DenoiserParams:
    store = ParamStore()
    init = Initializer(store, model.seed, model.init_scale)
    init_text(init, model, len(VOCABULARY))
    init_backbone(init, model)
    init_resampler(init, model)
    init_refiner(init, model)
    init_grounding(init, model.dim, FourierSpec(model.fourier_frequencies), model.grounding_hidden)

    params = DenoiserParams(model, schedule_from_config(schedule), store)
    set_stage(params, stage)
    log.debug('initialised parameters', extra={'fields': {'count': len(store), 'stage': stage}})
    return params


def params_from_config(config: RunConfig, stage: str | None = None) -> DenoiserParams:
    return build_params(config.model, config.schedule, stage or config.train.stage)


def set_stage(params: DenoiserParams, stage: str) -> None:
    if stage not in STAGE_GROUPS:
        raise InputError('Unknown training stage: %s' % stage)
    params.store.set_trainable(STAGE_GROUPS[stage])


class SubjectInput:
    """One personalisation target of a forward pass"""

    def __init__(
            self,
            reference: SubjectReference,
            entity_index: token_index,
            box: BoundingBox | None = None,
            views: Sequence[Tensor] | None = None
        ) -> None:
        self.reference = reference
        self.entity_index = entity_index
        self.box = box
        self.views = list(views) if views is not None else None


def subject_views(
        subject: SubjectReference,
        patch: int,
        seed: seed | None = None,
        frame_pair: bool = False,
        augment_images: bool = False
    ) -> list[Tensor]:
    """Patchified views fed to the resampler

    Frame pairs give the reference plus a pose-changed supplement; single
    images are augmented when enabled. Without a seed the reference alone
    is used.
    """
    if seed is None:
        return [patchify(subject.image, subject.mask, patch)]
    if frame_pair:
        reference, supplement = make_frame_pair(subject, seed)
        return [patchify(reference.image, reference.mask, patch), patchify(supplement.image, supplement.mask, patch)]
    if augment_images:
        image, mask = augment(subject.image, subject.mask, seed)
        return [patchify(image, mask, patch)]
    return [patchify(subject.image, subject.mask, patch)]


def encode_subjects(subjects: Sequence[SubjectInput], params: DenoiserParams, weights: Weights) -> Conditioning:
    """Static features, dynamic features and grounding tokens of every subject

    Keys of several subjects are concatenated; one grounding token is built
    per boxed subject.
    """
    if not subjects:
        return Conditioning()
    config = params.config
    resampler = ResamplerParams(weights.scope('resampler'), config.resampler_depth)

    statics, masks, dynamics, grounded = [], [], [], []
    for subject in subjects:
        c_e = word_embedding([subject.reference.entity_token], weights)
        views = subject.views or subject_views(subject.reference, config.subject_patch)
        c_d = encode_dynamic(views, resampler)
        dynamics.append(c_d)

        pooled: DiffNode = mean(c_d, axis=0)
        if config.use_static_refiner:
            static = refine_static(subject.reference, c_e.array, params, weights)
            statics.append(static.tokens)
            masks.append(static.key_mask)
            pooled = static.pooled()
        if subject.box is not None:
            grounded.append((pooled, c_e, subject.box))

    g = None
    if config.use_grounding and grounded:
        g = build_grounding_tokens(grounded, FourierSpec(config.fourier_frequencies), weights.scope('grounding'))

    return Conditioning(
        concat(statics, axis=0) if statics else None,
        np.concatenate(masks) if masks else None,
        concat(dynamics, axis=0),
        g
    )
