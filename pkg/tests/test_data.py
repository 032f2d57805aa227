import json
import os

import numpy as np
import pytest

from lcpdiff.config import DatasetConfig
from lcpdiff.data import (
    EntitySpan, RequestRecord, ShapeSpec, detokenize, generate_requests, generate_scene_retrying, generate_splits,
    iter_annotations, load_png, read_dataset, read_requests, render_subject, save_png, shape_mask, tokenize_prompt,
    write_dataset, write_requests
)
from lcpdiff.layout import BoundingBox
from lcpdiff.utils import InputError, ParseError, VocabularyError

SMALL = DatasetConfig(train=4, eval_scenes=2, requests=2, max_subjects=2)


def test_tokenize_prompt():
    ids, spans = tokenize_prompt('A red circle')
    assert len(ids) == 3
    assert spans == [EntitySpan(1, 3, 2)]
    assert detokenize(ids) == 'a red circle'


def test_tokenize_two_subjects():
    ids, spans = tokenize_prompt('a striped blue square and a green cross')
    assert [s.head for s in spans] == [3, 7]
    assert spans[0].start == 1


def test_tokenize_rejects_unknown_words():
    with pytest.raises(VocabularyError):
        tokenize_prompt('')
    with pytest.raises(VocabularyError):
        tokenize_prompt('a red banana')


def test_shape_spec_validation():
    with pytest.raises(InputError):
        ShapeSpec('hexagon', 'red', 0.3)
    with pytest.raises(InputError):
        ShapeSpec('square', 'red', 0.9)
    assert ShapeSpec.from_dict(ShapeSpec('cross', 'blue', 0.2).eval()) == ShapeSpec('cross', 'blue', 0.2)


def test_render_square():
    image, mask = render_subject(ShapeSpec('square', 'red', 0.25), 16)
    assert mask.array.sum() == 16
    assert image.shape == [3, 16, 16]
    assert image.array[:, 6, 6].tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(InputError):
        render_subject(ShapeSpec('square', 'red', 0.25), 8)


def test_circle_is_symmetric():
    mask = shape_mask('circle', 9)
    assert np.array_equal(mask, mask.T)
    assert np.array_equal(mask, mask[::-1])
    assert np.array_equal(mask, mask[:, ::-1])


def test_triangle_points_up():
    mask = shape_mask('triangle', 8)
    assert mask[0].sum() < mask[-1].sum()


def test_scene_boxes_are_tight():
    image, annotation = generate_scene_retrying(DatasetConfig(), 3, 32)
    annotation.validate()
    assert image.shape == [3, 32, 32]
    for subject in annotation.subjects:
        assert subject.box == BoundingBox.from_mask(subject.mask(32))
        assert annotation.prompt[subject.entity_index] == subject.entity_token


def test_scene_is_a_pure_function_of_its_seed():
    a = generate_scene_retrying(DatasetConfig(), 8, 32)
    b = generate_scene_retrying(DatasetConfig(), 8, 32)
    assert a[0] == b[0]
    assert a[1].eval() == b[1].eval()


def test_grayscale_scene():
    image, _ = generate_scene_retrying(DatasetConfig(), 3, 32, channels=1)
    assert image.shape == [1, 32, 32]


def test_splits_do_not_share_scenes():
    train, evaluation = generate_splits(SMALL, 0, 32)
    assert len(train) == 4 and len(evaluation) == 2
    assert not {a.key() for _, a in train} & {a.key() for _, a in evaluation}


def test_dataset_round_trip(tmp_path):
    records = [generate_scene_retrying(SMALL, seed, 32) for seed in range(2)]
    write_dataset(str(tmp_path), records)
    loaded = read_dataset(str(tmp_path))
    assert len(loaded) == 2
    for (image, annotation), (back, restored) in zip(records, loaded):
        assert restored.eval() == annotation.eval()
        assert np.allclose(back.array, image.array, atol=1.0 / 255.0)
    assert json.loads((tmp_path / 'dataset.json').read_text())['scenes'] == 2


def test_corrupted_annotation_line(tmp_path):
    write_dataset(str(tmp_path), [generate_scene_retrying(SMALL, 0, 32)])
    with open(tmp_path / 'annotations.jsonl', 'a', encoding='utf-8') as f:
        f.write('{"image": "images/00001.png", "seed": 1\n')
    with pytest.raises(ParseError) as info:
        list(iter_annotations(str(tmp_path)))
    assert info.value.line == 2


def test_loose_box_is_rejected(tmp_path):
    write_dataset(str(tmp_path), [generate_scene_retrying(SMALL, 0, 32)])
    path = tmp_path / 'annotations.jsonl'
    record = json.loads(path.read_text())
    record['subjects'][0]['box'] = [0.0, 0.0, 1.0, 1.0]
    path.write_text(json.dumps(record) + '\n')
    with pytest.raises(ParseError):
        read_dataset(str(tmp_path))


def test_png_round_trip(tmp_path):
    image, _ = render_subject(ShapeSpec('circle', 'green', 0.4), 16)
    path = os.path.join(tmp_path, 'x.png')
    save_png(path, image)
    assert load_png(path) == image


def test_requests_round_trip(tmp_path):
    requests = generate_requests(SMALL, 0, 32, subjects=2)
    assert len(requests) == 2
    assert all(len(r.subjects) == 2 and not r.box_free for r in requests)
    write_requests(str(tmp_path / 'requests.json'), requests)
    assert [r.eval() for r in read_requests(str(tmp_path / 'requests.json'))] == [r.eval() for r in requests]


def test_request_resolution():
    record = RequestRecord.from_dict({
        'prompt': 'a red square and a blue circle',
        'subjects': [{'entity': 'circle', 'box': [0.1, 0.1, 0.4, 0.4]}, {'entity': 'square'}],
        'seed': 3
    })
    ids, resolved = record.resolve()
    assert [k for k, _ in resolved] == [6, 2]
    assert [spec.color for _, spec in resolved] == ['blue', 'red']
    assert resolved[0][1].size == pytest.approx(0.3)
    assert not record.box_free


def test_malformed_request_file(tmp_path):
    path = tmp_path / 'requests.json'
    path.write_text('{"prompt": ')
    with pytest.raises(ParseError):
        read_requests(str(path))
    path.write_text('[{"prompt": "a red square"}]')
    with pytest.raises(ParseError):
        read_requests(str(path))
