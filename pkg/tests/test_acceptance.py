"""
Desk-scale acceptance runs on the default configuration. Every test here is
slow: the shared fixture generates the corpora and trains both stages once.
"""
import json

import numpy as np
import pytest

from lcpdiff.autodiff import DiffNode
from lcpdiff.checkpoint import load_checkpoint
from lcpdiff.cli import main
from lcpdiff.commands import SUMMARY_FILE
from lcpdiff.config import RunConfig
from lcpdiff.data import read_requests
from lcpdiff.denoiser import denoiser_forward, encode_text
from lcpdiff.enums import ExitCode, ParamGroup, Stage
from lcpdiff.layout import guided_update, layout_loss, step_size
from lcpdiff.model import encode_subjects, set_stage
from lcpdiff.sampler import request_from_record, sample
from lcpdiff.tensor import Tensor
from lcpdiff.utils import make_rng

pytestmark = pytest.mark.slow

WINDOW = 50


def summary(path) -> dict:
    return json.loads((path / SUMMARY_FILE).read_text())


@pytest.fixture(scope='module')
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp('acceptance')
    data, backbone, adapter = root / 'data', root / 'backbone', root / 'adapter'
    assert main(['dataset', '--out', str(data)]) == ExitCode.OK
    assert main(['train', str(data), '--stage', 'backbone', '--out', str(backbone)]) == ExitCode.OK
    assert main([
        'train', str(data), '--checkpoint', str(backbone / 'checkpoint.npz'), '--out', str(adapter)
    ]) == ExitCode.OK
    return root


@pytest.fixture(scope='module')
def compared(trained):
    """Eval summaries of guided against unguided sampling, single- and two-subject"""
    checkpoint = str(trained / 'adapter' / 'checkpoint.npz')
    reports = {}
    for name, requests in (('single', 'requests.json'), ('multi', 'requests_multi.json')):
        samples, report = trained / ('samples_%s' % name), trained / ('report_%s' % name)
        assert main([
            'sample', str(trained / 'data' / requests), '--checkpoint', checkpoint, '--compare', '--out', str(samples)
        ]) == ExitCode.OK
        assert main(['eval', str(samples), '--out', str(report)]) == ExitCode.OK
        reports[name] = summary(report)
    return reports


@pytest.fixture(scope='module')
def adapted(trained):
    params, _ = load_checkpoint(str(trained / 'adapter' / 'checkpoint.npz'))
    records = read_requests(str(trained / 'data' / 'requests.json'))[:20]
    return params, records


def test_backbone_loss_halves(trained):
    losses = summary(trained / 'backbone')['losses']
    assert len(losses) == RunConfig().train.steps
    assert np.mean(losses[-WINDOW:]) <= 0.5 * np.mean(losses[:WINDOW])


def test_adapter_training_leaves_backbone_untouched(trained):
    backbone, _ = load_checkpoint(str(trained / 'backbone' / 'checkpoint.npz'))
    adapter, _ = load_checkpoint(str(trained / 'adapter' / 'checkpoint.npz'))
    set_stage(backbone, Stage.ADAPTER)
    assert summary(trained / 'adapter')['frozen_hash'] == backbone.store.frozen_hash()
    for param in backbone.store:
        if param.group == ParamGroup.BACKBONE:
            assert np.array_equal(adapter.store[param.name].value, param.value)


def test_guidance_raises_ap50(compared):
    columns = compared['single']['columns']
    assert columns['guided']['samples'] == RunConfig().dataset.requests
    assert columns['guided']['ap50'] >= columns['unguided']['ap50'] + 0.25


def test_guidance_concentrates_attention(compared):
    ratios = compared['single']['attention_in_box']
    assert ratios['guided'] >= 1.3 * ratios['unguided']


def test_guidance_raises_two_subject_recall(compared):
    columns = compared['multi']['columns']
    assert columns['guided']['recall50'] >= columns['unguided']['recall50'] + 0.20


def test_one_guided_step_lowers_layout_loss(adapted):
    params, records = adapted
    config = RunConfig()
    guidance = config.guidance.replace(eta=1.0)
    lowered = 0
    for record in records:
        req = request_from_record(record, config)
        weights = params.bind()
        c_t = encode_text(req.prompt, weights)
        cond = encode_subjects(req.subjects, params, weights)
        size = params.config.image_size
        z = Tensor.randn(make_rng(req.seed, 3), params.config.channels, size, size)
        t = params.schedule.timesteps(req.steps)[0]

        leaf = DiffNode.leaf(z, requires_grad=True)
        before, _, _ = layout_loss(denoiser_forward(leaf, t, c_t, cond, params, weights).stack, req.assignments, guidance)
        loss_before = before.item()
        moved = guided_update(leaf, before, step_size(req.steps - 1, req.steps, guidance.alpha0), guidance.eta)
        after, _, _ = layout_loss(denoiser_forward(moved, t, c_t, cond, params, weights).stack, req.assignments, guidance)
        lowered += after.item() < loss_before
    assert lowered >= 18


def test_in_box_mass_grows_over_guided_steps(adapted):
    params, records = adapted
    config = RunConfig()
    grown, total = 0, 0
    for record in records:
        _, diagnostics = sample(request_from_record(record, config), params)
        means = [float(np.mean(step['ratios'])) for step in diagnostics.guided_steps]
        grown += sum(b >= a for a, b in zip(means, means[1:]))
        total += len(means) - 1
    assert total > 0
    assert grown >= 0.8 * total
