"""
`lcpdiff` command line: dataset generation, both training stages,
guided/unguided sampling, AP evaluation and the gradient self-check.
"""
import hashlib
import json
import os
import sys
from typing import Any

import numpy as np

from .autodiff import DiffNode, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .commands import App, Context
from .config import ModelConfig, ScheduleConfig
from .data import (
    generate_requests, generate_splits, load_png, read_dataset, read_requests, save_png, tokenize_prompt,
    write_dataset, write_requests
)
from .denoiser import DenoiserParams, denoiser_forward, encode_text
from .diffusion import latent_to_image
from .encoder import SubjectReference
from .enums import ExitCode, Stage
from .evaluate import APReport, Detection, GroundTruth, compute_ap, detect_blobs, render_report
from .layout import BoundingBox, layout_loss
from .logs import get_logger
from .model import SubjectInput, build_params, encode_subjects, params_from_config
from .sampler import request_from_record, sample_many
from .tensor import Tensor, finite_difference_gradient, relative_error
from .training import make_example, train
from .utils import BACKGROUND, PALETTE, FreezeError, InputError, color_values, digest, make_rng

log = get_logger(__name__)

app = App()

SAMPLES_FILE = 'samples.jsonl'
GRADCHECK_MODEL = ModelConfig(
    image_size=8, channels=1, patch=1, dim=8, num_queries=4, resampler_depth=1,
    subject_patch=4, grounding_hidden=16, init_scale=0.3
)
GRADCHECK_SCHEDULE = ScheduleConfig(steps=100)


def file_sha256(path: str) -> str:
    with open(path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


def image_sha256(image: np.ndarray) -> str:
    return digest(np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8))


def _load_params(ctx: Context, checkpoint: str, stage: str) -> tuple[DenoiserParams, ScheduleConfig]:
    if not checkpoint:
        log.warning('no checkpoint given, using a random initialisation')
        return params_from_config(ctx.config, stage), ctx.config.schedule
    params, meta = load_checkpoint(checkpoint)
    if params.config != ctx.config.model:
        log.warning('checkpoint model config differs from the run config; using the checkpoint', extra={'fields': {'path': checkpoint}})
    return params, ScheduleConfig.from_dict(meta['schedule'])


@app.command()
def cmd_dataset(ctx: Context):
    """Generate the train/eval scene corpora and the layout request files"""
    config = ctx.config
    size, channels = config.model.image_size, config.model.channels
    train_split, eval_split = generate_splits(config.dataset, config.seed, size, channels)
    write_dataset(ctx.path('train'), train_split)
    write_dataset(ctx.path('eval'), eval_split)

    single = generate_requests(config.dataset, config.seed, size, subjects=1)
    multi = generate_requests(config.dataset, config.seed, size, subjects=2, count=config.dataset.requests // 2)
    write_requests(ctx.path('requests.json'), single)
    write_requests(ctx.path('requests_multi.json'), multi)

    files = ['train/annotations.jsonl', 'eval/annotations.jsonl', 'requests.json', 'requests_multi.json']
    ctx.write_summary({
        'train': len(train_split),
        'eval': len(eval_split),
        'requests': len(single),
        'requests_multi': len(multi),
        'sha256': {name: file_sha256(ctx.path(name)) for name in files}
    })


@app.command()
def cmd_train(ctx: Context, data: str, checkpoint: str = '', stage: str = ''):
    """Train the backbone (--stage backbone) or the adapter on a scene corpus"""
    config = ctx.config
    train_config = config.train.replace(stage=stage) if stage else config.train
    if os.path.isfile(os.path.join(data, 'train', 'annotations.jsonl')):
        data = os.path.join(data, 'train')

    params, schedule = _load_params(ctx, checkpoint, train_config.stage)
    if train_config.stage == Stage.ADAPTER and not checkpoint:
        log.warning('adapter stage without a trained backbone')
    examples = [make_example(image, annotation) for image, annotation in read_dataset(data, params.config.channels)]

    def on_checkpoint(step: int, p: DenoiserParams) -> None:
        save_checkpoint(ctx.path('checkpoint_%06d.npz' % step), p, schedule, train_config.stage)

    frozen = params.store.copy()
    losses = train(examples, params, train_config, config.seed, on_checkpoint)
    for param in params.store.frozen():
        if not np.array_equal(param.value, frozen[param.name].value):
            raise FreezeError('Frozen parameter %s changed during training' % param.name)

    meta = save_checkpoint(ctx.path('checkpoint.npz'), params, schedule, train_config.stage)
    ctx.write_summary({
        'stage': train_config.stage,
        'examples': len(examples),
        'steps': len(losses),
        'loss_first': losses[0] if losses else None,
        'loss_last': losses[-1] if losses else None,
        'losses': losses,
        'frozen_hash': meta['frozen_hash'],
        'content_hash': meta['content_hash']
    })


def _write_samples(directory: str, records: list, requests: list, results: list, channels: int) -> list[dict[str, Any]]:
    os.makedirs(os.path.join(directory, 'images'), exist_ok=True)
    rows = []
    for i, (record, req, (latent, diagnostics)) in enumerate(zip(records, requests, results)):
        image = latent_to_image(latent)
        name = 'images/%05d.png' % i
        save_png(os.path.join(directory, name), image)
        _, resolved = record.resolve()
        rows.append({
            'index': i,
            'image': name,
            'channels': channels,
            'prompt': record.prompt,
            'seed': record.seed,
            'boxes': [s.box.eval() for s in req.subjects if s.box is not None],
            'colors': [spec.color for (_, spec), s in zip(resolved, req.subjects) if s.box is not None],
            'ratios': diagnostics.final_ratios,
            'guided_steps': len(diagnostics.guided_steps),
            'sha256': image_sha256(image)
        })
    with open(os.path.join(directory, SAMPLES_FILE), 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + '\n')
    return rows


@app.command()
def cmd_sample(ctx: Context, requests: str, checkpoint: str = '', compare: bool = False):
    """Sample layout requests; --compare also writes the unguided column"""
    params, _ = _load_params(ctx, checkpoint, Stage.ADAPTER)
    config = ctx.config.replace(model=params.config)
    records = read_requests(requests)

    guidance = config.guidance
    columns = {'guided': guidance, 'unguided': guidance.replace(enabled=False)} if compare else {'': guidance}

    hashes = {}
    for column, column_guidance in columns.items():
        reqs = [request_from_record(r, config.replace(guidance=column_guidance)) for r in records]
        results = sample_many(reqs, params, config.sampler.parallel)
        rows = _write_samples(ctx.path(column) if column else ctx.out, records, reqs, results, params.config.channels)
        hashes[column or 'samples'] = [row['sha256'] for row in rows]
        log.info('sampled', extra={'fields': {'event': 'column', 'name': column or 'samples', 'count': len(rows)}})

    ctx.write_summary({'requests': len(records), 'sha256': hashes})


def _sample_column(directory: str) -> tuple[list[Tensor], list[list[GroundTruth]], list[float]]:
    images, truths, ratios = [], [], []
    with open(os.path.join(directory, SAMPLES_FILE), encoding='utf-8') as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            if not row['boxes']:
                continue
            images.append(load_png(os.path.join(directory, row['image']), row['channels']))
            truths.append([GroundTruth(BoundingBox.from_list(b), c) for b, c in zip(row['boxes'], row['colors'])])
            if row.get('ratios'):
                ratios.extend(row['ratios'])
    return images, truths, ratios


def _dataset_column(directory: str, channels: int) -> tuple[list[Tensor], list[list[GroundTruth]], list[float]]:
    records = read_dataset(directory, channels)
    return (
        [image for image, _ in records],
        [[GroundTruth(s.box, s.spec.color) for s in annotation.subjects] for _, annotation in records],
        []
    )


@app.command()
def cmd_eval(ctx: Context, target: str):
    """AP of detected blobs against requested boxes, per sample column or for a dataset"""
    config = ctx.config
    if os.path.isfile(os.path.join(target, 'annotations.jsonl')):
        columns = {'dataset': _dataset_column(target, config.model.channels)}
    elif os.path.isfile(os.path.join(target, SAMPLES_FILE)):
        columns = {'samples': _sample_column(target)}
    else:
        columns = {
            name: _sample_column(os.path.join(target, name))
            for name in ('guided', 'unguided')
            if os.path.isfile(os.path.join(target, name, SAMPLES_FILE))
        }
    if not columns:
        raise InputError('Nothing to evaluate in %s' % target)

    reports: dict[str, APReport] = {}
    mean_ratios = {}
    for name, (images, truths, ratios) in columns.items():
        detections: list[list[Detection]] = [detect_blobs(image, config.evaluation.min_blob) for image in images]
        reports[name] = compute_ap(detections, truths, config.evaluation.thresholds)
        if ratios:
            mean_ratios[name] = float(np.mean(ratios))

    images, truths, _ = next(iter(columns.values()))
    render_report(
        reports, ctx.out, images, [[gt.box for gt in image] for image in truths],
        config.evaluation, {'attention_in_box': mean_ratios}
    )
    for name, report in reports.items():
        log.info('evaluated', extra={'fields': {'event': name, 'ap': report.ap, 'ap50': report.ap50, 'ap75': report.ap75}})
    ctx.write_summary({
        'columns': {name: report.eval() for name, report in reports.items()},
        'attention_in_box': mean_ratios
    })


def _gradcheck_subject(config: ModelConfig) -> tuple[SubjectReference, list[int], int]:
    ids, spans = tokenize_prompt('a red square')
    s, q = config.image_size, config.image_size // 4
    mask = np.zeros((s, s))
    mask[q:s - q, q:s - q] = 1.0
    fill = color_values(PALETTE['red'], config.channels)[:, None, None]
    back = color_values(BACKGROUND, config.channels)[:, None, None]
    image = back * (1.0 - mask) + fill * mask
    return SubjectReference(Tensor.wrap(image), Tensor.wrap(mask), ids[spans[0].head]), ids, spans[0].head


@app.command()
def cmd_gradcheck(ctx: Context, checkpoint: str = '', tolerance: float = 1e-4):
    """Compare the layout-loss latent gradient against central finite differences"""
    if checkpoint:
        params, _ = load_checkpoint(checkpoint)
    else:
        params = build_params(GRADCHECK_MODEL, GRADCHECK_SCHEDULE, Stage.ADAPTER)
    config = params.config
    guidance = ctx.config.guidance

    reference, ids, head = _gradcheck_subject(config)
    box = BoundingBox(0.5, 0.125, 0.875, 0.625)
    assignments = [(head, box)]
    weights = params.bind()
    c_t = encode_text(ids, weights)
    cond = encode_subjects([SubjectInput(reference, head, box)], params, weights)
    t = params.schedule.T // 2

    rng = make_rng(ctx.config.seed, 5)
    z = Tensor.randn(rng, config.channels, config.image_size, config.image_size)

    def loss_of(x: Tensor) -> float:
        return layout_loss(denoiser_forward(x, t, c_t, cond, params, weights).stack, assignments, guidance)[0].item()

    leaf = DiffNode.leaf(z, requires_grad=True)
    loss = layout_loss(denoiser_forward(leaf, t, c_t, cond, params, weights).stack, assignments, guidance)[0]
    backward(loss)
    analytic = leaf.grad
    numeric = finite_difference_gradient(loss_of, z)
    error = relative_error(analytic, numeric)

    passed = error <= tolerance
    max_abs = float(np.max(np.abs(analytic.array - numeric.array)))
    print('norm-wise relative error: %.3e, max abs difference: %.3e (%s)' % (error, max_abs, 'ok' if passed else 'FAILED'))
    ctx.write_summary({
        'loss': loss.item(),
        'relative_error': error,
        'max_abs_error': max_abs,
        'tolerance': tolerance,
        'entries': z.array.size,
        'passed': passed
    })
    return ExitCode.OK if passed else ExitCode.GRADCHECK


def main(argv: list[str] | None = None) -> int:
    return app.run(argv)


if __name__ == '__main__':
    sys.exit(main())
