import json

import numpy as np
import pytest

from lcpdiff.checkpoint import META_KEY, load_checkpoint, read_meta, save_checkpoint
from lcpdiff.config import ScheduleConfig
from lcpdiff.enums import Stage
from lcpdiff.utils import CheckpointError


def rewrite(path: str, change) -> None:
    with np.load(path) as archive:
        arrays = {name: archive[name] for name in archive.files}
    change(arrays)
    with open(path, 'wb') as f:
        np.savez(f, **arrays)


def test_round_trip(params, tmp_path):
    path = str(tmp_path / 'checkpoint.npz')
    meta = save_checkpoint(path, params, ScheduleConfig(steps=50), Stage.ADAPTER)
    loaded, loaded_meta = load_checkpoint(path)

    assert loaded_meta == meta == read_meta(path)
    assert loaded.config == params.config
    assert loaded.schedule.T == 50
    assert loaded.store.content_hash() == params.store.content_hash()
    assert loaded.store.frozen_hash() == params.store.frozen_hash()
    for a, b in zip(loaded.store, params.store):
        assert a.name == b.name and a.trainable == b.trainable
        assert np.array_equal(a.value, b.value)


def test_tampered_weights_are_rejected(params, tmp_path):
    path = str(tmp_path / 'checkpoint.npz')
    save_checkpoint(path, params, ScheduleConfig(steps=50), Stage.ADAPTER)

    def bump(arrays):
        arrays['backbone.in.b'] = arrays['backbone.in.b'] + 1e-3

    rewrite(path, bump)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_parameter_is_rejected(params, tmp_path):
    path = str(tmp_path / 'checkpoint.npz')
    save_checkpoint(path, params, ScheduleConfig(steps=50), Stage.ADAPTER)
    rewrite(path, lambda arrays: arrays.pop('grounding.out.b'))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_version_mismatch(params, tmp_path):
    path = str(tmp_path / 'checkpoint.npz')
    save_checkpoint(path, params, ScheduleConfig(steps=50), Stage.ADAPTER)

    def bump_version(arrays):
        meta = json.loads(str(arrays[META_KEY]))
        meta['version'] += 1
        arrays[META_KEY] = np.array(json.dumps(meta))

    rewrite(path, bump_version)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unreadable_file(tmp_path):
    path = tmp_path / 'broken.npz'
    path.write_bytes(b'not an archive')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
