"""
Deterministic DDIM sampling with box-constrained cross-attention regulation.

Inside the guided window every step runs a forward pass, computes the layout
losses from its text attention maps, moves the latent against their
gradient and only then denoises. Outside it, or without boxes, steps are
plain DDIM.
"""
import asyncio
from typing import Any, Sequence

from .annotations import seed, token_id
from .autodiff import DiffNode
from .config import GuidanceConfig, RunConfig, SamplerConfig
from .data import NULL_TOKEN, WORD_TO_ID, RequestRecord, render_subject
from .denoiser import DenoiserParams, denoiser_forward, encode_text
from .diffusion import ddim_step, guided_eps
from .encoder import SubjectReference
from .evaluate import attention_in_box_ratio
from .layout import Assignment, guided_update, layout_loss, step_size
from .logs import get_logger
from .model import SubjectInput, encode_subjects
from .tensor import Tensor
from .utils import GuidanceDivergenceError, InputError, make_rng

log = get_logger(__name__)


class SampleRequest:
    def __init__(
            self,
            prompt: list[token_id],
            subjects: list[SubjectInput],
            seed: seed,
            guidance: GuidanceConfig | None = None,
            steps: int = 50,
            cfg_scale: float = 7.5
        ) -> None:
        for subject in subjects:
            if not 0 <= subject.entity_index < len(prompt):
                raise InputError('Entity index %s outside prompt of %s tokens' % (subject.entity_index, len(prompt)))
            if prompt[subject.entity_index] != subject.reference.entity_token:
                raise InputError('Entity index %s does not hold the subject token' % subject.entity_index)
        self.prompt = prompt
        self.subjects = subjects
        self.seed = seed
        self.guidance = guidance or GuidanceConfig()
        self.steps = steps
        self.cfg_scale = cfg_scale

    @property
    def assignments(self) -> list[Assignment]:
        return [(s.entity_index, s.box) for s in self.subjects if s.box is not None]

    @property
    def box_free(self) -> bool:
        return not self.assignments

    def without_boxes(self) -> 'SampleRequest':
        subjects = [SubjectInput(s.reference, s.entity_index, None, s.views) for s in self.subjects]
        return SampleRequest(self.prompt, subjects, self.seed, self.guidance, self.steps, self.cfg_scale)


def request_from_record(record: RequestRecord, config: RunConfig, sampler: SamplerConfig | None = None) -> SampleRequest:
    """Render reference subjects for a layout request"""
    sampler = sampler or config.sampler
    ids, resolved = record.resolve()
    subjects = []
    for request_subject, (k, spec) in zip(record.subjects, resolved):
        image, mask = render_subject(spec, config.model.image_size, config.model.channels)
        subjects.append(SubjectInput(SubjectReference(image, mask, ids[k]), k, request_subject.box))
    return SampleRequest(ids, subjects, record.seed, config.guidance, sampler.steps, sampler.cfg_scale)


class SampleDiagnostics:
    def __init__(self) -> None:
        self.steps: list[dict[str, Any]] = []

    def record(self, **fields: Any) -> dict[str, Any]:
        self.steps.append(fields)
        return fields

    @property
    def guided_steps(self) -> list[dict[str, Any]]:
        return [s for s in self.steps if s.get('guided')]

    @property
    def final_ratios(self) -> list[float] | None:
        """In-box ratios at the last guided step, or the last step when nothing was guided"""
        steps = self.guided_steps or self.steps
        for step in reversed(steps):
            if step.get('ratios') is not None:
                return step['ratios']
        return None

    def eval(self) -> dict[str, Any]:
        return {'steps': self.steps}


def sample(req: SampleRequest, params: DenoiserParams) -> tuple[Tensor, SampleDiagnostics]:
    config = params.config
    guidance = req.guidance
    schedule = params.schedule
    weights = params.bind()

    c_t = encode_text(req.prompt, weights)
    c_null = encode_text([WORD_TO_ID[NULL_TOKEN]], weights)

    rng = make_rng(req.seed, 3)
    z = Tensor.randn(rng, config.channels, config.image_size, config.image_size)

    timesteps = schedule.timesteps(req.steps)
    S = len(timesteps)
    window = max(1, int(round(guidance.guided_fraction * S)))
    assignments = req.assignments
    regulate = guidance.enabled and guidance.eta > 0 and bool(assignments)
    # boxes reach the denoiser only together with regulation
    cond = encode_subjects(req.subjects if regulate else req.without_boxes().subjects, params, weights)

    diagnostics = SampleDiagnostics()
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < S else -1
        fields: dict[str, Any] = {'step': i, 't': t, 'guided': regulate and i < window}

        if fields['guided']:
            alpha_t = step_size(S - 1 - i, S, guidance.alpha0)
            fields['alpha_t'] = alpha_t
            for iteration in range(guidance.iterations):
                leaf = DiffNode.leaf(z, requires_grad=True)
                out = denoiser_forward(leaf, t, c_t, cond, params, weights)
                total, pos, sc = layout_loss(out.stack, assignments, guidance)
                if iteration == 0:
                    fields.update(loss=total.item(), loss_pos=pos.item(), loss_scale=sc.item())
                try:
                    z = guided_update(leaf, total, alpha_t, guidance.eta)
                except GuidanceDivergenceError as e:
                    diagnostics.record(**fields, error=str(e))
                    e.diagnostics = diagnostics
                    raise
            if guidance.recompute:
                out = denoiser_forward(z, t, c_t, cond, params, weights)
        else:
            out = denoiser_forward(z, t, c_t, cond, params, weights)

        if assignments:
            fields['ratios'] = attention_in_box_ratio(out.stack, assignments, guidance)

        eps = out.eps.value
        if req.cfg_scale != 1.0:
            eps = guided_eps(eps, denoiser_forward(z, t, c_null, None, params, weights).eps.value, req.cfg_scale)
        z = ddim_step(z, eps, t, t_prev, schedule)

        log.debug('sampling step', extra={'fields': diagnostics.record(**fields)})

    return z, diagnostics


async def _sample_async(req: SampleRequest, params: DenoiserParams, semaphore: asyncio.Semaphore) -> tuple[Tensor, SampleDiagnostics]:
    async with semaphore:
        return await asyncio.to_thread(sample, req, params)


async def _sample_all(requests: Sequence[SampleRequest], params: DenoiserParams, parallel: int) -> list[tuple[Tensor, SampleDiagnostics]]:
    semaphore = asyncio.Semaphore(parallel)
    return await asyncio.gather(*[_sample_async(req, params, semaphore) for req in requests])


def sample_many(requests: Sequence[SampleRequest], params: DenoiserParams, parallel: int = 1) -> list[tuple[Tensor, SampleDiagnostics]]:
    """Independent requests, `parallel` at a time; results keep request order"""
    if parallel <= 1:
        return [sample(req, params) for req in requests]
    return asyncio.run(_sample_all(requests, params, parallel))
