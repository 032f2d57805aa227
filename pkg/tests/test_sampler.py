import numpy as np
import pytest

from lcpdiff.config import GuidanceConfig, RunConfig, SamplerConfig
from lcpdiff.data import RequestRecord, RequestSubject
from lcpdiff.layout import BoundingBox
from lcpdiff.model import SubjectInput
from lcpdiff.sampler import SampleRequest, request_from_record, sample, sample_many
from lcpdiff.utils import InputError

BOX = BoundingBox(0.5, 0.125, 0.875, 0.625)


def make_request(red_square, guidance: GuidanceConfig, box: BoundingBox | None = BOX, seed: int = 11) -> SampleRequest:
    reference, ids, head = red_square
    return SampleRequest(ids, [SubjectInput(reference, head, box)], seed, guidance, steps=4, cfg_scale=1.0)


def test_request_validates_entity(red_square):
    reference, ids, head = red_square
    with pytest.raises(InputError):
        SampleRequest(ids, [SubjectInput(reference, 7, BOX)], 0)
    with pytest.raises(InputError):
        SampleRequest(ids, [SubjectInput(reference, head - 1, BOX)], 0)


def test_request_box_free(red_square):
    req = make_request(red_square, GuidanceConfig())
    assert not req.box_free
    assert req.assignments == [(red_square[2], BOX)]
    assert req.without_boxes().box_free


def test_sampling_is_deterministic(params, red_square):
    req = make_request(red_square, GuidanceConfig(eta=5.0))
    a, _ = sample(req, params)
    b, _ = sample(req, params)
    assert a == b
    assert a.shape == [3, 16, 16]


def test_zero_strength_matches_box_free(params, red_square):
    guided, _ = sample(make_request(red_square, GuidanceConfig(eta=0.0)), params)
    free, _ = sample(make_request(red_square, GuidanceConfig(eta=0.0), box=None), params)
    assert np.array_equal(guided.array, free.array)


def test_guidance_window(params, red_square):
    z, diagnostics = sample(make_request(red_square, GuidanceConfig(eta=5.0, guided_fraction=0.5)), params)
    guided = diagnostics.guided_steps
    assert [s['step'] for s in guided] == [0, 1]
    assert all(np.isfinite(s['loss']) and s['loss'] >= 0 for s in guided)
    assert guided[0]['alpha_t'] == pytest.approx(1.0)
    assert len(diagnostics.final_ratios) == 1

    plain, _ = sample(make_request(red_square, GuidanceConfig(eta=5.0, enabled=False)), params)
    assert not np.array_equal(z.array, plain.array)


def test_guided_window_has_at_least_one_step(params, red_square):
    _, diagnostics = sample(make_request(red_square, GuidanceConfig(eta=1.0, guided_fraction=0.01)), params)
    assert len(diagnostics.guided_steps) == 1


def test_box_free_request_records_no_ratios(params, red_square):
    _, diagnostics = sample(make_request(red_square, GuidanceConfig(), box=None), params)
    assert diagnostics.guided_steps == []
    assert diagnostics.final_ratios is None


def test_sample_many_keeps_order(params, red_square):
    reqs = [make_request(red_square, GuidanceConfig(eta=1.0), seed=s) for s in (1, 2, 3)]
    serial = [z for z, _ in sample_many(reqs, params, parallel=1)]
    threaded = [z for z, _ in sample_many(reqs, params, parallel=2)]
    assert serial == threaded
    assert serial[0] != serial[1]


def test_request_from_record(tiny_model):
    record = RequestRecord('a blue circle', [RequestSubject('circle', BOX)], 4)
    config = RunConfig(model=tiny_model, sampler=SamplerConfig(steps=3, cfg_scale=2.0))
    req = request_from_record(record, config)
    assert req.steps == 3 and req.cfg_scale == 2.0
    assert req.assignments == [(2, BOX)]
    assert req.subjects[0].reference.image.shape == [3, 16, 16]

    with pytest.raises(InputError):
        request_from_record(RequestRecord('a blue circle', [RequestSubject('square', BOX)], 4), config)


def open_gates(params, gamma: float = 0.7):
    for param in params.store:
        if param.name.endswith('.ground.gamma'):
            params.store.update(param.name, np.full(param.value.shape, gamma))
    return params


@pytest.mark.parametrize('seed', [3, 8])
def test_zero_strength_matches_box_free_with_open_gate(params, red_square, seed):
    open_gates(params)
    guided, _ = sample(make_request(red_square, GuidanceConfig(eta=0.0), seed=seed), params)
    free, _ = sample(make_request(red_square, GuidanceConfig(), box=None, seed=seed), params)
    assert np.array_equal(guided.array, free.array)

    disabled, _ = sample(make_request(red_square, GuidanceConfig(eta=5.0, enabled=False), seed=seed), params)
    assert np.array_equal(disabled.array, free.array)


def test_open_gate_changes_regulated_sampling(params, red_square):
    req = make_request(red_square, GuidanceConfig(eta=5.0))
    closed, _ = sample(req, params)
    opened, _ = sample(req, open_gates(params))
    assert not np.array_equal(closed.array, opened.array)
