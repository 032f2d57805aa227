"""
Synthetic shapes world: coloured geometric subjects composited on a flat
background, with exact masks, tight boxes and templated prompts.
"""
import json
import os
from typing import Any, Iterator, Sequence

import numpy as np
import regex
from PIL import Image
from scipy import ndimage

from .annotations import seed, token_id, token_index
from .config import DATASET_VERSION, DatasetConfig
from .enums import ShapeKind, Texture
from .evaluate import iou
from .interfaces import Record
from .layout import BoundingBox
from .logs import get_logger
from .tensor import Tensor, as_array
from .utils import (
    BACKGROUND, PALETTE, STRIPE_TINT, GenerationRetryError, InputError, ParseError, VocabularyError,
    color_values, make_rng
)

log = get_logger(__name__)

NULL_TOKEN = '<null>'
COLORS = tuple(PALETTE)
MODIFIERS = (*COLORS, *Texture.ALL, 'small', 'large')

VOCABULARY: tuple[str, ...] = (
    NULL_TOKEN, 'a', 'an', 'the', 'and', 'with', 'of', 'on', 'in', 'at',
    'near', 'next', 'to', 'beside', 'above', 'below', 'left', 'right', 'top', 'bottom',
    'center', 'middle', 'corner', 'edge', 'over', 'under', 'behind', 'front', 'small', 'large',
    'photo', 'picture', 'image', 'scene', 'shape', 'shapes', 'background', 'gray', 'one', 'two',
    'three', 'is', 'are', 'there', 'some', 'bright', 'plain', 'pattern',
    *Texture.ALL, *COLORS, *ShapeKind.ALL
)
WORD_TO_ID: dict[str, token_id] = {word: i for i, word in enumerate(VOCABULARY)}

WORD_PATTERN = regex.compile(r'<null>|\p{L}+')

MIN_CANVAS = 16
SCENE_STRIDE = 10_000_000
EVAL_OFFSET = 5_000_000
REQUEST_OFFSET = 7_000_000
MULTI_OFFSET = 8_000_000
SCENE_RETRIES = 10


# VOCABULARY

class EntitySpan:
    def __init__(self, start: token_index, end: token_index, head: token_index) -> None:
        self.start = start
        self.end = end
        self.head = head  # index k of the subject word

    def eval(self) -> dict[str, int]:
        return {'start': self.start, 'end': self.end, 'head': self.head}

    def __eq__(self, other: object) -> bool:
        return isinstance(other, EntitySpan) and other.eval() == self.eval()

    def __repr__(self) -> str:
        return f'EntitySpan({self.start}, {self.end}, head={self.head})'


def word_for(id: token_id) -> str:
    if not 0 <= id < len(VOCABULARY):
        raise VocabularyError('Unknown token id: %s' % id)
    return VOCABULARY[id]


def split_words(prompt: str | Sequence[str]) -> list[str]:
    if isinstance(prompt, str):
        return WORD_PATTERN.findall(prompt.lower())
    return [str(word).lower() for word in prompt]


def tokenize_prompt(prompt: str | Sequence[str]) -> tuple[list[token_id], list[EntitySpan]]:
    words = split_words(prompt)
    if not words:
        raise VocabularyError('Empty prompt')
    if unknown := [w for w in words if w not in WORD_TO_ID]:
        raise VocabularyError('Out-of-vocabulary word(s): %s' % ', '.join(unknown))

    ids = [WORD_TO_ID[w] for w in words]
    spans = []
    for i, word in enumerate(words):
        if word not in ShapeKind.ALL:
            continue
        start = i
        while start > 0 and words[start - 1] in MODIFIERS:
            start -= 1
        spans.append(EntitySpan(start, i + 1, i))
    return ids, spans


def detokenize(ids: Sequence[token_id]) -> str:
    return ' '.join(word_for(i) for i in ids)


def make_prompt(specs: Sequence['ShapeSpec']) -> str:
    return ' and '.join(f'a {spec.color} {spec.kind}' for spec in specs)


# SHAPES

class ShapeSpec(Record):
    def __init__(self, kind: str, color: str, size: float, texture: str = Texture.SOLID) -> None:
        if kind not in ShapeKind.ALL:
            raise InputError('Unknown shape: %s' % kind)
        if color not in PALETTE:
            raise InputError('Color %s is not in the palette' % color)
        if not 0.15 <= size <= 0.45:
            raise InputError('Shape size %s outside [0.15, 0.45]' % size)
        if texture not in Texture.ALL:
            raise InputError('Unknown texture: %s' % texture)
        self.kind = kind
        self.color = color
        self.size = float(size)
        self.texture = texture

    @staticmethod
    def from_dict(data: dict[str, Any]) -> 'ShapeSpec':
        return ShapeSpec(data['shape'], data['color'], data['size'], data.get('texture', Texture.SOLID))

    def side(self, canvas: int) -> int:
        return max(1, int(round(self.size * canvas)))

    def eval(self) -> dict[str, Any]:
        return {
            'shape': self.kind,
            'color': self.color,
            'size': self.size,
            'texture': self.texture
        }

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ShapeSpec) and other.eval() == self.eval()

    def __repr__(self) -> str:
        return f'ShapeSpec({self.texture} {self.color} {self.kind}, size={self.size:.3f})'


def shape_mask(kind: str, side: int) -> np.ndarray:
    """Binary [side x side] footprint sampled at pixel centres"""
    c = (np.arange(side) + 0.5) / side
    v, u = np.meshgrid(c, c, indexing='ij')
    half_pixel = 0.5 / side
    match kind:
        case ShapeKind.SQUARE:
            mask = np.ones((side, side), dtype=bool)
        case ShapeKind.CIRCLE:
            mask = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
        case ShapeKind.TRIANGLE:
            mask = np.abs(u - 0.5) <= v / 2.0 + half_pixel
        case ShapeKind.CROSS:
            mask = (np.abs(u - 0.5) <= 1.0 / 6.0) | (np.abs(v - 0.5) <= 1.0 / 6.0)
        case _:
            raise InputError('Unknown shape: %s' % kind)
    return mask


def render_sprite(spec: ShapeSpec, side: int, channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Colour layer [C x side x side] and footprint of one subject"""
    mask = shape_mask(spec.kind, side)
    base = PALETTE[spec.color]
    colors = np.empty((channels, side, side))
    colors[:] = color_values(base, channels)[:, None, None]
    if spec.texture == Texture.STRIPED:
        stripes = (np.arange(side) // 2) % 2 == 1
        colors[:, stripes, :] = color_values(base.tint(STRIPE_TINT), channels)[:, None, None]
    return colors, mask


def render_subject(spec: ShapeSpec, canvas: int, channels: int = 3) -> tuple[Tensor, Tensor]:
    """The subject centred on a background canvas"""
    if canvas < MIN_CANVAS:
        raise InputError('Canvas must be at least %s pixels' % MIN_CANVAS)
    side = spec.side(canvas)
    offset = (canvas - side) // 2
    return compose(canvas, [(spec, (offset, offset))], channels)


def place(mask: np.ndarray, origin: tuple[int, int], canvas: int) -> np.ndarray:
    x, y = origin
    h, w = mask.shape
    if x < 0 or y < 0 or x + w > canvas or y + h > canvas:
        raise InputError('Sprite at %s does not fit a %s canvas' % (origin, canvas))
    out = np.zeros((canvas, canvas), dtype=bool)
    out[y:y + h, x:x + w] = mask
    return out


def compose(canvas: int, subjects: Sequence[tuple[ShapeSpec, tuple[int, int]]], channels: int = 3) -> tuple[Tensor, Tensor]:
    """Background image with every subject pasted at its origin; returns (image, union mask)"""
    image = np.empty((channels, canvas, canvas))
    image[:] = color_values(BACKGROUND, channels)[:, None, None]
    union = np.zeros((canvas, canvas), dtype=bool)
    for spec, (x, y) in subjects:
        side = spec.side(canvas)
        colors, mask = render_sprite(spec, side, channels)
        region = image[:, y:y + side, x:x + side]
        region[:, mask] = colors[:, mask]
        union |= place(mask, (x, y), canvas)
    return Tensor.wrap(image), Tensor.wrap(union.astype(np.float64))


# SCENES

class SubjectAnnotation(Record):
    def __init__(self, spec: ShapeSpec, box: BoundingBox, origin: tuple[int, int], entity_index: token_index, entity_token: token_id) -> None:
        self.spec = spec
        self.box = box
        self.origin = (int(origin[0]), int(origin[1]))  # mask reference: the sprite is re-rendered here
        self.entity_index = entity_index
        self.entity_token = entity_token

    @staticmethod
    def from_dict(data: dict[str, Any]) -> 'SubjectAnnotation':
        return SubjectAnnotation(
            ShapeSpec.from_dict(data),
            BoundingBox.from_list(data['box']),
            tuple(data['origin']),
            int(data['entity_index']),
            int(data['entity_token'])
        )

    def mask(self, canvas: int) -> np.ndarray:
        return place(shape_mask(self.spec.kind, self.spec.side(canvas)), self.origin, canvas)

    def eval(self) -> dict[str, Any]:
        return {
            **self.spec.eval(),
            'box': self.box.eval(),
            'origin': list(self.origin),
            'entity_index': self.entity_index,
            'entity_token': self.entity_token
        }


class SceneAnnotation(Record):
    def __init__(self, image: str, seed: seed, prompt: list[token_id], subjects: list[SubjectAnnotation], size: int) -> None:
        if not 1 <= len(subjects) <= 3:
            raise InputError('A scene holds 1 to 3 subjects, got %s' % len(subjects))
        self.image = image
        self.seed = seed
        self.prompt = prompt
        self.subjects = subjects
        self.size = size

    @staticmethod
    def from_dict(data: dict[str, Any]) -> 'SceneAnnotation':
        return SceneAnnotation(
            data['image'],
            int(data['seed']),
            [int(i) for i in data['prompt']],
            [SubjectAnnotation.from_dict(s) for s in data['subjects']],
            int(data['size'])
        )

    def validate(self) -> None:
        """Boxes must be the tight extents of the re-rendered masks"""
        for subject in self.subjects:
            tight = BoundingBox.from_mask(subject.mask(self.size))
            if not np.allclose(tight.coords, subject.box.coords, atol=1e-9):
                raise InputError('Box %s is not the tight extent %s of its mask' % (subject.box, tight))
            if not 0 <= subject.entity_index < len(self.prompt):
                raise InputError('Entity index %s outside the prompt' % subject.entity_index)
            if self.prompt[subject.entity_index] != subject.entity_token:
                raise InputError('Entity index %s does not hold token %s' % (subject.entity_index, subject.entity_token))

    def key(self, quantum: int = 8) -> tuple:
        """Identity used to keep scenes from crossing the split boundary"""
        return tuple(sorted(
            (s.spec.kind, s.spec.color, tuple(int(round(c * quantum)) for c in s.box.coords))
            for s in self.subjects
        ))

    def eval(self) -> dict[str, Any]:
        return {
            'image': self.image,
            'seed': self.seed,
            'size': self.size,
            'prompt': self.prompt,
            'subjects': [s.eval() for s in self.subjects]
        }


def _random_spec(rng: np.random.Generator, config: DatasetConfig) -> ShapeSpec:
    return ShapeSpec(
        ShapeKind.ALL[rng.integers(len(ShapeKind.ALL))],
        COLORS[rng.integers(len(COLORS))],
        float(rng.uniform(config.size_min, config.size_max)),
        Texture.STRIPED if rng.random() < config.striped_ratio else Texture.SOLID
    )


def generate_scene(
        config: DatasetConfig,
        seed: seed,
        size: int = 32,
        channels: int = 3,
        count: int | None = None
    ) -> tuple[Tensor, SceneAnnotation]:
    """Rejection-sampled scene of 1-3 subjects; a pure function of its arguments"""
    rng = make_rng(seed)
    count = count if count is not None else int(rng.integers(config.min_subjects, config.max_subjects + 1))

    placed: list[tuple[ShapeSpec, tuple[int, int], BoundingBox, np.ndarray]] = []
    for _ in range(count):
        for _ in range(config.max_attempts):
            spec = _random_spec(rng, config)
            side = spec.side(size)
            origin = (int(rng.integers(0, size - side + 1)), int(rng.integers(0, size - side + 1)))
            mask = place(shape_mask(spec.kind, side), origin, size)
            box = BoundingBox.from_mask(mask)
            grown = ndimage.binary_dilation(mask)
            if all(iou(box, other) <= config.max_iou and not (grown & m).any() for _, _, other, m in placed):
                placed.append((spec, origin, box, mask))
                break
        else:
            raise GenerationRetryError('Could not place subject %s after %s attempts (seed %s)' % (len(placed) + 1, config.max_attempts, seed))

    image, _ = compose(size, [(spec, origin) for spec, origin, _, _ in placed], channels)
    ids, spans = tokenize_prompt(make_prompt([spec for spec, _, _, _ in placed]))
    subjects = [
        SubjectAnnotation(spec, box, origin, span.head, ids[span.head])
        for (spec, origin, box, _), span in zip(placed, spans)
    ]
    return image, SceneAnnotation('', seed, ids, subjects, size)


def generate_scene_retrying(config: DatasetConfig, seed: seed, size: int = 32, channels: int = 3, count: int | None = None) -> tuple[Tensor, SceneAnnotation]:
    """generate_scene, moving to derived seeds when placement fails"""
    for attempt in range(SCENE_RETRIES):
        scene_seed = seed if attempt == 0 else seed + attempt * SCENE_STRIDE * 97
        try:
            return generate_scene(config, scene_seed, size, channels, count)
        except GenerationRetryError:
            log.debug('placement failed, retrying', extra={'fields': {'seed': scene_seed}})
    raise GenerationRetryError('Scene %s could not be generated after %s seeds' % (seed, SCENE_RETRIES))


def generate_splits(
        config: DatasetConfig,
        seed: seed,
        size: int = 32,
        channels: int = 3
    ) -> tuple[list[tuple[Tensor, SceneAnnotation]], list[tuple[Tensor, SceneAnnotation]]]:
    """Train and eval corpora from disjoint seed ranges, eval deduplicated against train"""
    base = seed * SCENE_STRIDE
    train = [generate_scene_retrying(config, base + i, size, channels) for i in range(config.train)]
    seen = {annotation.key() for _, annotation in train}

    evaluation, i = [], 0
    while len(evaluation) < config.eval_scenes:
        if i >= EVAL_OFFSET // 2:
            raise GenerationRetryError('Eval split exhausted its seed range')
        image, annotation = generate_scene_retrying(config, base + EVAL_OFFSET + i, size, channels)
        i += 1
        if annotation.key() in seen:
            continue
        seen.add(annotation.key())
        evaluation.append((image, annotation))
    return train, evaluation


# STORAGE

def save_png(path: str, image: 'Tensor | np.ndarray') -> None:
    array = as_array(image)
    pixels = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[0] == 1:
        Image.fromarray(pixels[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).save(path)


def load_png(path: str, channels: int = 3) -> Tensor:
    try:
        with Image.open(path) as img:
            img = img.convert('L' if channels == 1 else 'RGB')
            pixels = np.asarray(img, dtype=np.float64) / 255.0
    except OSError as e:
        raise ParseError('Unreadable image %s: %s' % (path, e)) from e
    if pixels.ndim == 2:
        pixels = pixels[None]
    else:
        pixels = pixels.transpose(2, 0, 1)
    return Tensor.wrap(np.ascontiguousarray(pixels))


def write_dataset(path: str, records: Sequence[tuple[Tensor, SceneAnnotation]]) -> list[SceneAnnotation]:
    os.makedirs(os.path.join(path, 'images'), exist_ok=True)
    written = []
    with open(os.path.join(path, 'annotations.jsonl'), 'w', encoding='utf-8') as f:
        for i, (image, annotation) in enumerate(records):
            annotation.image = 'images/%05d.png' % i
            save_png(os.path.join(path, annotation.image), image)
            f.write(json.dumps(annotation.eval(), sort_keys=True) + '\n')
            written.append(annotation)
    with open(os.path.join(path, 'dataset.json'), 'w', encoding='utf-8') as f:
        json.dump({'version': DATASET_VERSION, 'scenes': len(written)}, f, sort_keys=True)
    return written


def iter_annotations(path: str) -> Iterator[SceneAnnotation]:
    """Eagerly validated records of an annotations.jsonl file"""
    file = os.path.join(path, 'annotations.jsonl') if os.path.isdir(path) else path
    try:
        f = open(file, encoding='utf-8')
    except OSError as e:
        raise ParseError('Unreadable annotations %s: %s' % (file, e)) from e
    with f:
        for number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                annotation = SceneAnnotation.from_dict(json.loads(line))
                annotation.validate()
            except (ValueError, KeyError, TypeError, InputError) as e:
                raise ParseError('%s: %s' % (type(e).__name__, e), number) from e
            yield annotation


def read_dataset(path: str, channels: int = 3) -> list[tuple[Tensor, SceneAnnotation]]:
    return [
        (load_png(os.path.join(path, annotation.image), channels), annotation)
        for annotation in iter_annotations(path)
    ]


# LAYOUT REQUESTS

class RequestSubject(Record):
    def __init__(
            self,
            entity: str,
            box: BoundingBox | None = None,
            color: str | None = None,
            texture: str = Texture.SOLID,
            size: float | None = None
        ) -> None:
        if entity not in ShapeKind.ALL:
            raise InputError('Entity must be a shape word, got %s' % entity)
        self.entity = entity
        self.box = box
        self.color = color
        self.texture = texture
        self.size = size

    @staticmethod
    def from_dict(data: dict[str, Any]) -> 'RequestSubject':
        box = data.get('box')
        return RequestSubject(
            data['entity'],
            BoundingBox.from_list(box) if box is not None else None,
            data.get('color'),
            data.get('texture', Texture.SOLID),
            data.get('size')
        )

    def eval(self) -> dict[str, Any]:
        out = {'entity': self.entity, 'texture': self.texture}
        if self.box is not None:
            out['box'] = self.box.eval()
        if self.color is not None:
            out['color'] = self.color
        if self.size is not None:
            out['size'] = self.size
        return out


class RequestRecord(Record):
    def __init__(self, prompt: str, subjects: list[RequestSubject], seed: seed) -> None:
        if not 1 <= len(subjects) <= 3:
            raise InputError('A request holds 1 to 3 subjects')
        self.prompt = prompt
        self.subjects = subjects
        self.seed = seed

    @staticmethod
    def from_dict(data: dict[str, Any]) -> 'RequestRecord':
        return RequestRecord(data['prompt'], [RequestSubject.from_dict(s) for s in data['subjects']], int(data['seed']))

    @property
    def box_free(self) -> bool:
        return all(s.box is None for s in self.subjects)

    def resolve(self) -> tuple[list[token_id], list[tuple[token_index, ShapeSpec]]]:
        """Prompt ids and, per subject, its head-word index and shape spec"""
        ids, spans = tokenize_prompt(self.prompt)
        words = split_words(self.prompt)
        unused = list(spans)
        out = []
        for subject in self.subjects:
            span = next((s for s in unused if words[s.head] == subject.entity), None)
            if span is None:
                raise InputError('Entity %s does not appear in prompt %r' % (subject.entity, self.prompt))
            unused.remove(span)
            color = subject.color or next((w for w in words[span.start:span.end] if w in PALETTE), None)
            if color is None:
                raise InputError('No colour given for %s' % subject.entity)
            size = subject.size
            if size is None:
                size = max(subject.box.width, subject.box.height) if subject.box is not None else 0.3
            out.append((span.head, ShapeSpec(subject.entity, color, float(np.clip(size, 0.15, 0.45)), subject.texture)))
        return ids, out

    def eval(self) -> dict[str, Any]:
        return {'prompt': self.prompt, 'subjects': [s.eval() for s in self.subjects], 'seed': self.seed}


def request_from_scene(annotation: SceneAnnotation, seed: seed) -> RequestRecord:
    return RequestRecord(
        make_prompt([s.spec for s in annotation.subjects]),
        [RequestSubject(s.spec.kind, s.box, s.spec.color, s.spec.texture, s.spec.size) for s in annotation.subjects],
        seed
    )


def generate_requests(config: DatasetConfig, seed: seed, size: int = 32, subjects: int = 1, count: int | None = None) -> list[RequestRecord]:
    """Held-out layout requests with `subjects` boxed subjects each"""
    offset = REQUEST_OFFSET if subjects == 1 else MULTI_OFFSET
    base = seed * SCENE_STRIDE + offset
    count = config.requests if count is None else count
    out = []
    for i in range(count):
        _, annotation = generate_scene_retrying(config, base + i, size, count=subjects)
        out.append(request_from_scene(annotation, base + i))
    return out


def write_requests(path: str, requests: Sequence[RequestRecord]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump([r.eval() for r in requests], f, indent=2, sort_keys=True)


def read_requests(path: str) -> list[RequestRecord]:
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ParseError('Unreadable request file %s: %s' % (path, e)) from e
    except ValueError as e:
        raise ParseError('Malformed request file: %s' % e, getattr(e, 'lineno', None)) from e
    if not isinstance(data, list):
        raise ParseError('Request file must hold a JSON array')
    out = []
    for i, item in enumerate(data):
        try:
            out.append(RequestRecord.from_dict(item))
        except (KeyError, TypeError, ValueError, InputError) as e:
            raise ParseError('request %s: %s: %s' % (i, type(e).__name__, e)) from e
    return out
