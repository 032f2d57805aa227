"""
Toy noise-prediction backbone over a two-level token pyramid.

Latent patches become tokens on the fine grid, pass one attention block,
are merged 2x2 onto the coarse grid for a second block, and are upsampled
back with a skip connection for the third. Every block applies
static -> grounding -> dynamic attention when subject conditioning is given
and plain self-attention plus text cross-attention otherwise.
"""
from typing import Any, NamedTuple, Sequence

import numpy as np

from .annotations import timestep, token_id
from .attention import (
    AdapterParams, dynamic_cross_attention, grounding_attention, init_attention_block, self_attention, static_attention
)
from .autodiff import DiffNode, add, gelu, layer_norm, linear, node, take
from .config import REFINER_CACHE_SIZE, ModelConfig
from .diffusion import NoiseSchedule, timestep_embedding
from .enums import ParamGroup
from .layout import AttentionLayer, AttentionStack, GroundingTokens, upsample_index
from .params import Initializer, ParamStore, Weights
from .tensor import Tensor
from .utils import InputError, LruCache, ShapeError

# (block index, pyramid level)
BLOCKS = ((0, 0), (1, 1), (2, 0))


class Conditioning:
    """Subject-derived inputs of one forward pass

    `c_s` and `key_mask` feed static attention, `c_d` the subject branch of
    dynamic cross-attention and `g` grounding attention. Any of them may be
    None.
    """

    def __init__(
            self,
            c_s: DiffNode | None = None,
            key_mask: np.ndarray | None = None,
            c_d: DiffNode | None = None,
            g: GroundingTokens | None = None
        ) -> None:
        if (c_s is None) != (key_mask is None):
            raise InputError('Static features and their key mask come together')
        self.c_s = c_s
        self.key_mask = key_mask
        self.c_d = c_d
        self.g = g

    @property
    def grounding(self) -> DiffNode | None:
        return self.g.tokens if self.g is not None else None


class DenoiserOutput(NamedTuple):
    eps: DiffNode
    stack: AttentionStack


class DenoiserParams:
    def __init__(self, config: ModelConfig, schedule: NoiseSchedule, store: ParamStore) -> None:
        self.config = config
        self.schedule = schedule
        self.store = store
        self.refiner_cache: LruCache[np.ndarray] = LruCache(REFINER_CACHE_SIZE)

    def bind(self, track: bool = False) -> Weights:
        return self.store.bind(track)

    def adapter(self, weights: Weights, block: int) -> AdapterParams:
        c = self.config
        return AdapterParams(weights.scope(f'block{block}'), c.alpha, c.beta, c.lambda_)

    def eval(self) -> dict[str, Any]:
        return {
            'model': self.config.eval(),
            'schedule': self.schedule.eval(),
            'params': [p.eval() for p in self.store]
        }


# INITIALIZATION

def init_backbone(init: Initializer, config: ModelConfig) -> None:
    d, group = config.dim, ParamGroup.BACKBONE
    p0, p1 = config.levels

    init.xavier('backbone.in.w', (config.patch_dim, d), group)
    init.zeros('backbone.in.b', (d,), group)
    init.normal('backbone.pos0', (p0 * p0, d), group)
    init.normal('backbone.pos1', (p1 * p1, d), group)
    init.xavier('backbone.time.w1', (d, d), group)
    init.zeros('backbone.time.b1', (d,), group)
    init.xavier('backbone.time.w2', (d, d), group)
    init.zeros('backbone.time.b2', (d,), group)
    init.xavier('backbone.down.w', (4 * d, d), group)
    init.zeros('backbone.down.b', (d,), group)
    init.xavier('backbone.up.w', (d, d), group)
    init.zeros('backbone.up.b', (d,), group)
    init.ones('backbone.out.ln.g', (d,), group)
    init.zeros('backbone.out.ln.b', (d,), group)
    init.normal('backbone.out.w', (d, config.patch_dim), group)
    init.zeros('backbone.out.b', (config.patch_dim,), group)

    for block, _ in BLOCKS:
        init_attention_block(init, f'block{block}', d, config.ffn_mult)


def init_text(init: Initializer, config: ModelConfig, vocab_size: int) -> None:
    """Frozen random word table standing in for a pretrained text encoder"""
    init.normal('text.embed', (vocab_size, config.dim), ParamGroup.TEXT, scale=1.0)
    init.normal('text.pos', (config.max_prompt, config.dim), ParamGroup.TEXT, scale=0.1)


# TEXT

def word_embedding(ids: Sequence[token_id], weights: Weights) -> DiffNode:
    table = weights['text.embed']
    vocab, d = table.shape
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size == 0:
        raise InputError('Empty prompt')
    if ids.min() < 0 or ids.max() >= vocab:
        raise InputError('Token id outside vocabulary of %s words' % vocab)
    return take(table, ids[:, None] * d + np.arange(d)[None, :])


def encode_text(ids: Sequence[token_id], weights: Weights) -> DiffNode:
    """Prompt tokens [n x d]: word embeddings plus positions"""
    pos = weights['text.pos']
    if len(ids) > pos.shape[0]:
        raise InputError('Prompt of %s tokens exceeds max_prompt %s' % (len(ids), pos.shape[0]))
    return add(word_embedding(ids, weights), pos[:len(ids)])


# TOKEN LAYOUT

def patch_index(channels: int, size: int, patch: int) -> np.ndarray:
    """Flat latent indices [g^2 x C*P*P] gathering each patch in (c, row, col) order"""
    g = size // patch
    c, i, j, a, b = np.meshgrid(
        np.arange(channels), np.arange(g), np.arange(g), np.arange(patch), np.arange(patch), indexing='ij'
    )
    flat = c * size * size + (i * patch + a) * size + (j * patch + b)
    return flat.transpose(1, 2, 0, 3, 4).reshape(g * g, channels * patch * patch)


def unpatch_index(channels: int, size: int, patch: int) -> np.ndarray:
    index = patch_index(channels, size, patch).reshape(-1)
    inverse = np.empty_like(index)
    inverse[index] = np.arange(index.size)
    return inverse.reshape(channels, size, size)


def merge_index(p: int, d: int) -> np.ndarray:
    """Gather [p^2 x d] into [(p/2)^2 x 4d], concatenating each 2x2 cell group"""
    q = p // 2
    i, j, a, b, f = np.meshgrid(np.arange(q), np.arange(q), np.arange(2), np.arange(2), np.arange(d), indexing='ij')
    rows = (2 * i + a) * p + (2 * j + b)
    return (rows * d + f).reshape(q * q, 4 * d)


# FORWARD

def _block(
        h: DiffNode,
        c_t: DiffNode,
        cond: Conditioning | None,
        adapter: AdapterParams
    ) -> tuple[DiffNode, DiffNode, DiffNode | None]:
    """Returns (h, text map, self-attention values when running without adapters)"""
    w = adapter.weights
    x = layer_norm(h, w['ln1.g'], w['ln1.b'])
    self_values = None
    if cond is None:
        attended = self_attention(x, w.scope('self'))
        z = add(h, attended.out)
        self_values = attended.mixed
        c_d = None
    else:
        z = add(h, static_attention(x, cond.c_s, cond.key_mask, adapter))
        z = grounding_attention(z, cond.grounding, adapter)
        c_d = cond.c_d

    out, text_attn = dynamic_cross_attention(layer_norm(z, w['ln2.g'], w['ln2.b']), c_t, c_d, adapter)
    h = add(z, out)
    x = layer_norm(h, w['ln3.g'], w['ln3.b'])
    h = add(h, linear(gelu(linear(x, w['ffn.w1'], w['ffn.b1'])), w['ffn.w2'], w['ffn.b2']))
    return h, text_attn, self_values


def denoiser_forward(
        z_t: 'DiffNode | Tensor',
        t: timestep,
        c_t: DiffNode,
        cond: Conditioning | None,
        params: DenoiserParams,
        weights: Weights | None = None
    ) -> DenoiserOutput:
    """Noise prediction [C x H x W] and the text cross-attention maps

    `cond` None runs the frozen text-only backbone. The stack also carries
    each block's self-attention values in that mode.
    """
    config = params.config
    weights = weights if weights is not None else params.bind()
    z_t = node(z_t)
    expected = [config.channels, config.image_size, config.image_size]
    if z_t.shape != expected:
        raise ShapeError('Latent shape %s, expected %s' % (z_t.shape, expected))
    c_t = node(c_t)
    if c_t.shape[1] != config.dim:
        raise ShapeError('Text tokens have dim %s, expected %s' % (c_t.shape[1], config.dim))

    d = config.dim
    p0, p1 = config.levels
    w = weights.scope('backbone')

    temb = linear(gelu(linear(timestep_embedding(t, d), w['time.w1'], w['time.b1'])), w['time.w2'], w['time.b2'])
    tokens = take(z_t, patch_index(config.channels, config.image_size, config.patch))
    h = add(add(linear(tokens, w['in.w'], w['in.b']), w['pos0']), temb)

    layers, self_values = [], []

    def run(h: DiffNode, block: int, p: int) -> DiffNode:
        h, text_attn, values = _block(h, c_t, cond, params.adapter(weights, block))
        layers.append(AttentionLayer(text_attn, p, block))
        if values is not None:
            self_values.append((block, p, values.array))
        return h

    h0 = run(h, 0, p0)
    h = add(linear(take(h0, merge_index(p0, d)), w['down.w'], w['down.b']), w['pos1'])
    h = run(h, 1, p1)
    h = add(h0, linear(take(h, upsample_index(p1, p0, d)), w['up.w'], w['up.b']))
    h = run(h, 2, p0)

    out = linear(layer_norm(h, w['out.ln.g'], w['out.ln.b']), w['out.w'], w['out.b'])
    eps = take(out, unpatch_index(config.channels, config.image_size, config.patch))
    return DenoiserOutput(eps, AttentionStack(layers, t, self_values))
