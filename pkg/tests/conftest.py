import numpy as np
import pytest

from lcpdiff.config import ModelConfig, ScheduleConfig
from lcpdiff.data import ShapeSpec, render_subject, tokenize_prompt
from lcpdiff.encoder import SubjectReference
from lcpdiff.enums import Stage
from lcpdiff.model import build_params

TINY_MODEL = ModelConfig(
    image_size=16, channels=3, patch=2, dim=16, num_queries=4, resampler_depth=1,
    subject_patch=4, grounding_hidden=16
)
TINY_SCHEDULE = ScheduleConfig(steps=50)


@pytest.fixture
def tiny_model() -> ModelConfig:
    return TINY_MODEL


@pytest.fixture
def params():
    return build_params(TINY_MODEL, TINY_SCHEDULE, Stage.ADAPTER)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def red_square():
    """(reference, prompt ids, head index) of 'a red square' on a 16px canvas"""
    ids, spans = tokenize_prompt('a red square')
    image, mask = render_subject(ShapeSpec('square', 'red', 0.3), TINY_MODEL.image_size)
    head = spans[0].head
    return SubjectReference(image, mask, ids[head]), ids, head
