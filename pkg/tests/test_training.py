import numpy as np
import pytest

from lcpdiff.autodiff import DiffNode
from lcpdiff.config import DatasetConfig, ScheduleConfig, TrainConfig
from lcpdiff.data import generate_scene_retrying
from lcpdiff.enums import ParamGroup, Stage
from lcpdiff.model import build_params, set_stage
from lcpdiff.params import ParamStore
from lcpdiff.tensor import Tensor
from lcpdiff.training import AdamW, make_example, mse_loss, optimizer_for, pretrain_step, train, training_step
from lcpdiff.utils import FreezeError, InputError


@pytest.fixture
def examples(tiny_model):
    config = DatasetConfig(max_subjects=2)
    return [make_example(*generate_scene_retrying(config, seed, tiny_model.image_size, tiny_model.channels)) for seed in range(3)]


def test_mse_loss():
    eps = Tensor(np.ones((1, 2, 2)))
    assert mse_loss(DiffNode.constant(np.ones((1, 2, 2))), eps).item() == 0.0
    assert mse_loss(DiffNode.constant(np.zeros((1, 2, 2))), eps).item() == pytest.approx(1.0)


def test_make_example(tiny_model):
    image, annotation = generate_scene_retrying(DatasetConfig(max_subjects=2), 5, tiny_model.image_size)
    example = make_example(image, annotation)
    assert np.allclose(example.z0.array, image.array * 2.0 - 1.0)
    assert len(example.references) == len(annotation.subjects)
    for (reference, index), subject in zip(example.references, annotation.subjects):
        assert index == subject.entity_index
        assert reference.entity_token == example.prompt[index]
        assert reference.box == subject.box


def test_adamw_skips_frozen_parameters():
    store = ParamStore()
    store.add('a', np.ones(2), ParamGroup.ADAPTER, trainable=True)
    store.add('b', np.ones(2), ParamGroup.BACKBONE, trainable=False)
    AdamW(lr=0.1, weight_decay=0.0).step(store, {'a': np.ones(2), 'b': np.ones(2)})
    assert np.allclose(store['a'].value, 0.9)
    assert store['b'].value.tolist() == [1.0, 1.0]
    with pytest.raises(FreezeError):
        store.update('b', np.zeros(2))


def test_adamw_decoupled_decay():
    store = ParamStore()
    store.add('a', np.full(1, 2.0), ParamGroup.ADAPTER, trainable=True)
    AdamW(lr=0.1, weight_decay=0.5).step(store, {'a': np.zeros(1)})
    assert store['a'].value.tolist() == pytest.approx([2.0 * (1 - 0.1 * 0.5)])


def test_optimizer_for_stage():
    assert optimizer_for(TrainConfig(stage=Stage.BACKBONE, backbone_lr=1e-3)).lr == 1e-3
    assert optimizer_for(TrainConfig(stage=Stage.ADAPTER, lr=5e-5)).lr == 5e-5


def test_adapter_step_keeps_backbone_frozen(params, examples):
    config = TrainConfig(batch=2, text_dropout=0.0)
    frozen = params.store.frozen_hash()
    before = params.store.content_hash()
    loss = training_step(examples[:2], params, optimizer_for(config), config, np.random.default_rng(0))
    assert np.isfinite(loss)
    assert params.store.frozen_hash() == frozen
    assert params.store.content_hash() != before
    for param in params.store:
        assert param.trainable == (param.group in (ParamGroup.ADAPTER, ParamGroup.RESAMPLER, ParamGroup.REFINER, ParamGroup.GROUNDING))


def test_backbone_step_trains_only_the_backbone(params, examples):
    set_stage(params, Stage.BACKBONE)
    config = TrainConfig(stage=Stage.BACKBONE, batch=1)
    before = {p.name: p.value.copy() for p in params.store}
    pretrain_step(examples[:1], params, optimizer_for(config), config, np.random.default_rng(0))
    changed = {p.group for p in params.store if not np.array_equal(p.value, before[p.name])}
    assert changed == {ParamGroup.BACKBONE}


def test_train_is_deterministic(tiny_model, examples):
    config = TrainConfig(steps=2, batch=2, log_every=1)
    runs = []
    for _ in range(2):
        params = build_params(tiny_model, ScheduleConfig(steps=50))
        losses = train(examples, params, config, seed=7, progress=False)
        runs.append((losses, params.store.content_hash()))
    assert runs[0] == runs[1]
    assert len(runs[0][0]) == 2


def test_train_checkpoint_callback(params, examples):
    seen = []
    train(examples, params, TrainConfig(steps=2, batch=1, checkpoint_every=1), 0, lambda step, p: seen.append(step), progress=False)
    assert seen == [1, 2]


def test_train_needs_examples(params):
    with pytest.raises(InputError):
        train([], params, TrainConfig(steps=1), 0)
