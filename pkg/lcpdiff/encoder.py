"""
Subject encoders: a perceiver resampler turning patchified subject views into
a fixed number of dynamic feature tokens, and a static detail refiner that
reads the frozen denoiser's self-attention over the masked subject.
"""
from typing import Any, Sequence

import numpy as np

from .annotations import seed, token_id
from .autodiff import DiffNode, add, concat, gelu, layer_norm, linear, mean, node
from .attention import attend
from .config import ModelConfig
from .denoiser import BLOCKS, DenoiserParams, denoiser_forward
from .diffusion import add_noise, image_to_latent
from .enums import ParamGroup
from .layout import BoundingBox
from .params import Initializer, Weights
from .tensor import Tensor, as_array
from .utils import InputError, ShapeError, digest, make_rng


class SubjectReference:
    def __init__(self, image: Tensor, mask: Tensor, entity_token: token_id, box: BoundingBox | None = None) -> None:
        image = image if isinstance(image, Tensor) else Tensor(image)
        mask = mask if isinstance(mask, Tensor) else Tensor(mask)
        if image.rank != 3:
            raise ShapeError('Subject image must be [C x H x W], got %s' % image.shape)
        if mask.shape != image.shape[1:]:
            raise ShapeError('Mask shape %s does not match image %s' % (mask.shape, image.shape[1:]))
        if not np.all((mask.array == 0) | (mask.array == 1)):
            raise InputError('Subject mask must be binary')
        if not mask.array.any():
            raise InputError('Subject mask has no foreground pixel')
        if image.array.min() < 0.0 or image.array.max() > 1.0:
            raise InputError('Subject image values must lie in [0, 1]')

        self.image = image
        self.mask = mask
        self.entity_token = entity_token
        self.box = box if box is not None else BoundingBox.from_mask(mask.array)

    @property
    def masked(self) -> np.ndarray:
        return self.image.array * self.mask.array[None]

    def eval(self) -> dict[str, Any]:
        return {
            'entity_token': self.entity_token,
            'box': self.box.eval(),
            'pixels': int(self.mask.array.sum()),
            'sha256': digest(self.image.array, self.mask.array)
        }


class StaticDetailFeatures:
    def __init__(self, tokens: DiffNode, source_levels: list[int], key_mask: np.ndarray) -> None:
        if key_mask.size != tokens.shape[0]:
            raise ShapeError('Key mask of %s entries for %s static tokens' % (key_mask.size, tokens.shape[0]))
        self.tokens = tokens
        self.source_levels = source_levels
        self.key_mask = key_mask

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    def pooled(self) -> DiffNode:
        return mean(self.tokens, axis=0)


# PATCHES

def patchify(image: Tensor, mask: Tensor, patch_size: int) -> Tensor:
    """Masked patch tokens, led by one global mean token"""
    image, mask = as_array(image), as_array(mask)
    c, h, w = image.shape
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise ShapeError('Patch size %s does not divide %sx%s' % (patch_size, h, w))

    masked = image * mask[None]
    gh, gw = h // patch_size, w // patch_size
    patches = masked.reshape(c, gh, patch_size, gw, patch_size).transpose(1, 3, 0, 2, 4)
    patches = patches.reshape(gh * gw, c * patch_size * patch_size)
    return Tensor.wrap(np.concatenate([patches.mean(axis=0, keepdims=True), patches], axis=0))


def sinusoid_positions(n: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.arange(n)[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((n, 1))], axis=1)
    return out


# DYNAMIC ADAPTIVE ENCODER

class ResamplerParams:
    def __init__(self, weights: Weights, depth: int) -> None:
        self.weights = weights
        self.depth = depth

    @property
    def queries(self) -> DiffNode:
        return self.weights['queries']

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights['proj_in.w'].shape[0]


def init_resampler(init: Initializer, config: ModelConfig) -> None:
    d, group = config.dim, ParamGroup.RESAMPLER
    hidden = config.ffn_mult * d

    init.xavier('resampler.proj_in.w', (config.subject_patch_dim, d), group)
    init.zeros('resampler.proj_in.b', (d,), group)
    init.normal('resampler.queries', (config.num_queries, d), group, scale=1.0)
    for i in range(config.resampler_depth):
        prefix = f'resampler.layers{i}'
        for ln in ('ln_x', 'ln_l', 'ln_ff'):
            init.ones(f'{prefix}.{ln}.g', (d,), group)
            init.zeros(f'{prefix}.{ln}.b', (d,), group)
        for w in ('wq', 'wk', 'wv', 'wo'):
            init.xavier(f'{prefix}.attn.{w}', (d, d), group)
        init.xavier(f'{prefix}.ff.w1', (d, hidden), group)
        init.zeros(f'{prefix}.ff.b1', (hidden,), group)
        init.xavier(f'{prefix}.ff.w2', (hidden, d), group)
        init.zeros(f'{prefix}.ff.b2', (d,), group)
    init.xavier('resampler.proj_out.w', (d, d), group)
    init.zeros('resampler.proj_out.b', (d,), group)
    init.ones('resampler.norm_out.g', (d,), group)
    init.zeros('resampler.norm_out.b', (d,), group)


def encode_dynamic(views: Sequence['Tensor | DiffNode'], params: ResamplerParams) -> DiffNode:
    """N learnable queries attend over the concatenated view tokens

    Each view gets fixed sinusoidal positions, so token order matters.
    """
    if not views:
        raise InputError('encode_dynamic needs at least one view')

    w = params.weights
    d = w['queries'].shape[1]
    projected = []
    for view in views:
        view = node(view)
        if view.value.rank != 2 or view.shape[1] != params.input_dim:
            raise ShapeError('View tokens %s, expected [n x %s]' % (view.shape, params.input_dim))
        x = linear(view, w['proj_in.w'], w['proj_in.b'])
        projected.append(add(x, sinusoid_positions(view.shape[0], d)))
    x = concat(projected, axis=0)

    latents = w['queries']
    for i in range(params.depth):
        layer = w.scope(f'layers{i}')
        media = layer_norm(x, layer['ln_x.g'], layer['ln_x.b'])
        normed = layer_norm(latents, layer['ln_l.g'], layer['ln_l.b'])
        kv = concat([media, normed], axis=0)
        attn = layer.scope('attn')
        latents = add(latents, attend(normed, kv, attn['wq'], attn['wk'], attn['wv'], attn['wo']).out)
        h = layer_norm(latents, layer['ln_ff.g'], layer['ln_ff.b'])
        latents = add(latents, linear(gelu(linear(h, layer['ff.w1'], layer['ff.b1'])), layer['ff.w2'], layer['ff.b2']))

    out = linear(latents, w['proj_out.w'], w['proj_out.b'])
    return layer_norm(out, w['norm_out.g'], w['norm_out.b'])


# STATIC DETAIL REFINER

def refiner_blocks(config: ModelConfig) -> list[int]:
    return sorted(config.refiner_blocks) if config.refiner_blocks else [block for block, _ in BLOCKS]


def init_refiner(init: Initializer, config: ModelConfig) -> None:
    d = config.dim
    init.xavier('refiner.proj.w', (len(refiner_blocks(config)) * d, d), ParamGroup.REFINER)
    init.zeros('refiner.proj.b', (d,), ParamGroup.REFINER)


def pool_tokens(values: np.ndarray, p: int, target: int) -> np.ndarray:
    """Average-pool [p^2 x d] tokens onto a [target^2 x d] grid"""
    if p % target:
        raise ShapeError('Cannot pool a %s grid onto %s' % (p, target))
    f = p // target
    d = values.shape[1]
    return values.reshape(target, f, target, f, d).mean(axis=(1, 3)).reshape(target * target, d)


def resize_mask(mask: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resize of an [H x W] mask onto a target grid

    A mask too small to hit any sample point snaps to the cell holding its
    centroid.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = ((np.arange(target) + 0.5) * h / target).astype(int)
    cols = ((np.arange(target) + 0.5) * w / target).astype(int)
    out = (mask[np.ix_(rows, cols)] != 0).astype(np.float64)
    if not out.any():
        ys, xs = np.nonzero(mask)
        out[min(int(ys.mean() * target / h), target - 1), min(int(xs.mean() * target / w), target - 1)] = 1.0
    return out


def refiner_timestep(config: ModelConfig, T: int) -> int:
    return min(int(round(config.refiner_timestep * T)), T - 1)


def refiner_features(subject: SubjectReference, class_embedding: 'Tensor | np.ndarray', denoiser: DenoiserParams) -> np.ndarray:
    """Pooled self-attention values of the frozen backbone, concatenated per block

    Deterministic and cached; the backbone is frozen, so only the projection
    applied afterwards carries gradients.
    """
    config = denoiser.config
    class_embedding = as_array(class_embedding).reshape(1, -1)
    masked = subject.masked
    key = digest(masked, class_embedding, np.frombuffer(denoiser.store.frozen_hash().encode(), dtype=np.uint8))
    if (cached := denoiser.refiner_cache.get(key)) is not None:
        return cached

    t = refiner_timestep(config, denoiser.schedule.T)
    z0 = image_to_latent(masked)
    z_t = add_noise(z0, t, Tensor.zeros(*z0.shape), denoiser.schedule)
    stack = denoiser_forward(z_t, t, DiffNode.constant(class_embedding), None, denoiser).stack

    target = min(config.levels)
    chosen = refiner_blocks(config)
    pooled = [pool_tokens(values, p, target) for block, p, values in stack.self_values if block in chosen]
    features = np.concatenate(pooled, axis=1)
    features.setflags(write=False)
    denoiser.refiner_cache.put(key, features)
    return features


def refine_static(
        subject: SubjectReference,
        class_embedding: 'Tensor | np.ndarray',
        denoiser: DenoiserParams,
        weights: Weights | None = None
    ) -> StaticDetailFeatures:
    weights = weights if weights is not None else denoiser.bind()
    features = refiner_features(subject, class_embedding, denoiser)
    tokens = linear(features, weights['refiner.proj.w'], weights['refiner.proj.b'])
    target = min(denoiser.config.levels)
    key_mask = resize_mask(subject.mask.array, target).reshape(-1)
    return StaticDetailFeatures(tokens, refiner_blocks(denoiser.config), key_mask)


# AUGMENTATION

class AugmentParams:
    def __init__(
            self,
            hue: float = 0.0,
            brightness: float = 1.0,
            flip: bool = False,
            rotation: int = 0,
            dx: int = 0,
            dy: int = 0
        ) -> None:
        self.hue = hue  # fraction of a half turn
        self.brightness = brightness
        self.flip = flip
        self.rotation = rotation % 4  # quarter turns
        self.dx = dx
        self.dy = dy

    @property
    def is_identity(self) -> bool:
        return (self.hue == 0.0 and self.brightness == 1.0 and not self.flip
                and self.rotation == 0 and self.dx == 0 and self.dy == 0)

    def eval(self) -> dict[str, Any]:
        return {
            'hue': self.hue,
            'brightness': self.brightness,
            'flip': self.flip,
            'rotation': self.rotation,
            'dx': self.dx,
            'dy': self.dy
        }


def draw_augment(rng: np.random.Generator, size: int, color: float = 0.2, pose: bool = True) -> AugmentParams:
    shift = int(0.1 * size)
    return AugmentParams(
        hue=float(rng.uniform(-color, color)),
        brightness=float(rng.uniform(1.0 - color, 1.0 + color)),
        flip=bool(rng.integers(2)) if pose else False,
        rotation=int(rng.integers(4)) if pose else 0,
        dx=int(rng.integers(-shift, shift + 1)) if pose else 0,
        dy=int(rng.integers(-shift, shift + 1)) if pose else 0
    )


def _hue_matrix(fraction: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space"""
    theta = fraction * np.pi
    u = np.ones(3) / np.sqrt(3.0)
    cross = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.cos(theta) * np.eye(3) + np.sin(theta) * cross + (1.0 - np.cos(theta)) * np.outer(u, u)


def _shift(array: np.ndarray, dy: int, dx: int, fill: float) -> np.ndarray:
    out = np.full_like(array, fill)
    h, w = array.shape[-2:]
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[..., dst_y, dst_x] = array[..., src_y, src_x]
    return out


def apply_augment(image: Tensor, mask: Tensor, params: AugmentParams) -> tuple[Tensor, Tensor]:
    if params.is_identity:
        return image, mask

    img, m = as_array(image).copy(), as_array(mask).copy()
    if img.shape[0] == 3 and params.hue != 0.0:
        img = np.einsum('ij,jhw->ihw', _hue_matrix(params.hue), img)
    img = np.clip(img * params.brightness, 0.0, 1.0)

    if params.flip:
        img, m = img[..., ::-1], m[..., ::-1]
    if params.rotation:
        img, m = np.rot90(img, params.rotation, axes=(-2, -1)), np.rot90(m, params.rotation, axes=(-2, -1))

    # translation is clipped so the subject stays inside the frame
    ys, xs = np.nonzero(m)
    h, w = m.shape
    dy = int(np.clip(params.dy, -ys.min(), h - 1 - ys.max()))
    dx = int(np.clip(params.dx, -xs.min(), w - 1 - xs.max()))
    if dy or dx:
        img = _shift(img, dy, dx, 0.0)
        m = _shift(m, dy, dx, 0.0)
    return Tensor(img), Tensor(m)


def augment(image: Tensor, mask: Tensor, seed: seed) -> tuple[Tensor, Tensor]:
    rng = make_rng(seed, 1)
    return apply_augment(image, mask, draw_augment(rng, as_array(mask).shape[-1]))


def make_frame_pair(subject: SubjectReference, seed: seed) -> tuple[SubjectReference, SubjectReference]:
    """The subject plus a pose-changed copy standing in for another video frame"""
    rng = make_rng(seed, 2)
    params = draw_augment(rng, subject.mask.shape[-1], color=0.05)
    image, mask = apply_augment(subject.image, subject.mask, params)
    return subject, SubjectReference(image, mask, subject.entity_token)
