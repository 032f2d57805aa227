"""
Checkpoint container: an `.npz` archive holding one array per parameter and
a `__meta__` JSON entry with the format version, producing stage, configs,
per-parameter flags and hashes, and the overall content hash.
"""
import json
import os
from typing import Any

import numpy as np

from .config import CHECKPOINT_VERSION, ModelConfig, ScheduleConfig
from .denoiser import DenoiserParams
from .diffusion import schedule_from_config
from .logs import get_logger
from .params import ParamStore
from .utils import CheckpointError, ConfigError, digest

log = get_logger(__name__)

META_KEY = '__meta__'


def checkpoint_meta(params: DenoiserParams, schedule: ScheduleConfig, stage: str) -> dict[str, Any]:
    return {
        'version': CHECKPOINT_VERSION,
        'stage': stage,
        'model': params.config.eval(),
        'schedule': schedule.eval(),
        'params': {p.name: p.eval() for p in params.store},
        'frozen_hash': params.store.frozen_hash(),
        'content_hash': params.store.content_hash()
    }


def save_checkpoint(path: str, params: DenoiserParams, schedule: ScheduleConfig, stage: str) -> dict[str, Any]:
    meta = checkpoint_meta(params, schedule, stage)
    arrays = {p.name: p.value for p in params.store}
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, 'wb') as f:
        np.savez(f, **arrays)
    log.debug('saved checkpoint', extra={'fields': {'event': 'checkpoint', 'path': path, 'content_hash': meta['content_hash']}})
    return meta


def read_meta(path: str) -> dict[str, Any]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            return json.loads(str(archive[META_KEY]))
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError('Unreadable checkpoint %s: %s' % (path, e)) from e


def load_checkpoint(path: str) -> tuple[DenoiserParams, dict[str, Any]]:
    """Parameters and metadata; every stored hash is verified"""
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive[META_KEY]))
            arrays = {name: archive[name] for name in archive.files if name != META_KEY}
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError('Unreadable checkpoint %s: %s' % (path, e)) from e

    if meta.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError('Checkpoint version %s, expected %s' % (meta.get('version'), CHECKPOINT_VERSION))
    try:
        model = ModelConfig.from_dict(meta['model'])
        schedule = ScheduleConfig.from_dict(meta['schedule'])
    except ConfigError as e:
        raise CheckpointError('Checkpoint configuration is invalid: %s' % e) from e

    entries = meta['params']
    if set(entries) != set(arrays):
        raise CheckpointError('Checkpoint parameter names do not match its metadata')

    store = ParamStore()
    for name in sorted(entries):
        entry, value = entries[name], arrays[name]
        if list(value.shape) != entry['shape'] or digest(value) != entry['sha256']:
            raise CheckpointError('Hash mismatch for parameter %s' % name)
        store.add(name, value, entry['group'], entry['trainable'])

    if store.content_hash() != meta['content_hash']:
        raise CheckpointError('Content hash mismatch')
    if store.frozen_hash() != meta['frozen_hash']:
        raise CheckpointError('Frozen hash mismatch')
    return DenoiserParams(model, schedule_from_config(schedule), store), meta
