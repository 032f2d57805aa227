"""
Single-head attention and the three adapter stages installed in every
attention block: static attention over refined subject features, gated
grounding attention over grounding tokens and decoupled dynamic
cross-attention over text and subject features.
"""
from typing import NamedTuple

import numpy as np

from .autodiff import DiffNode, add, concat, matmul, mul, node, scale, softmax, tanh, transpose
from .enums import ParamGroup
from .params import Initializer, ParamStore, Weights
from .utils import InputError, ShapeError


class Attended(NamedTuple):
    out: DiffNode  # projected output
    attn: DiffNode  # softmaxed map [queries x keys]
    mixed: DiffNode  # attn @ values, before the output projection


def attend(
        x_q: DiffNode,
        x_kv: DiffNode,
        wq: DiffNode,
        wk: DiffNode,
        wv: DiffNode,
        wo: DiffNode | None = None,
        mask: np.ndarray | None = None
    ) -> Attended:
    q = matmul(x_q, wq)
    k = matmul(x_kv, wk)
    v = matmul(x_kv, wv)
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.shape[1]))
    attn = softmax(scores, mask)
    mixed = matmul(attn, v)
    out = matmul(mixed, wo) if wo is not None else mixed
    return Attended(out, attn, mixed)


def self_attention(z: DiffNode, w: Weights) -> Attended:
    return attend(z, z, w['wq'], w['wk'], w['wv'], w['wo'])


class AdapterParams:
    """Adapter view over one attention block

    `weights` is the block scope of the bound parameters (`block0.` ...).
    The learnable gates `mu` and `gamma` are parameters; `alpha`, `beta` and
    `lambda_` are fixed coefficients.
    """

    @staticmethod
    def create(dim: int, seed: int = 0, alpha: float = 1.0, beta: float = 1.0, lambda_: float = 1.0) -> 'AdapterParams':
        """Stand-alone block with freshly initialised weights"""
        store = ParamStore()
        init = Initializer(store, seed)
        init_attention_block(init, 'block', dim, ffn_mult=2)
        return AdapterParams(store.bind().scope('block'), alpha, beta, lambda_)

    def __init__(self, weights: Weights, alpha: float = 1.0, beta: float = 1.0, lambda_: float = 1.0) -> None:
        for name, value in (('alpha', alpha), ('beta', beta), ('lambda_', lambda_)):
            if not 0.0 <= value <= 4.0:
                raise InputError('%s must lie in [0, 4], got %s' % (name, value))
        self.weights = weights
        self.alpha = alpha
        self.beta = beta
        self.lambda_ = lambda_

    @property
    def mu(self) -> DiffNode:
        return self.weights['static.mu']

    @property
    def gamma(self) -> DiffNode:
        return self.weights['ground.gamma']

    def replace(self, **changes: DiffNode | float) -> 'AdapterParams':
        """Copy with some weights or coefficients swapped, e.g. `mu=0.0`"""
        weights = Weights(self.weights)
        coefficients = {'alpha': self.alpha, 'beta': self.beta, 'lambda_': self.lambda_}
        for key, value in changes.items():
            match key:
                case 'alpha' | 'beta' | 'lambda_':
                    coefficients[key] = float(value)
                case 'mu':
                    weights['static.mu'] = node(np.full(self.mu.shape, float(value)) if not isinstance(value, DiffNode) else value)
                case 'gamma':
                    weights['ground.gamma'] = node(np.full(self.gamma.shape, float(value)) if not isinstance(value, DiffNode) else value)
                case _:
                    weights[key] = node(value)
        return AdapterParams(weights, **coefficients)


def init_attention_block(init: Initializer, prefix: str, dim: int, ffn_mult: int) -> None:
    """Frozen backbone weights plus the adapter weights of one block"""
    backbone, adapter = ParamGroup.BACKBONE, ParamGroup.ADAPTER
    hidden = ffn_mult * dim

    for ln in ('ln1', 'ln2', 'ln3'):
        init.ones(f'{prefix}.{ln}.g', (dim,), backbone)
        init.zeros(f'{prefix}.{ln}.b', (dim,), backbone)
    for w in ('wq', 'wk', 'wv', 'wo'):
        init.xavier(f'{prefix}.self.{w}', (dim, dim), backbone)
        init.xavier(f'{prefix}.text.{w}', (dim, dim), backbone)
    init.xavier(f'{prefix}.ffn.w1', (dim, hidden), backbone)
    init.zeros(f'{prefix}.ffn.b1', (hidden,), backbone)
    init.xavier(f'{prefix}.ffn.w2', (hidden, dim), backbone)
    init.zeros(f'{prefix}.ffn.b2', (dim,), backbone)

    # zero query/key and mu: the branch is silent at init, mu still gets a gradient
    init.zeros(f'{prefix}.static.wq', (dim, dim), adapter)
    init.zeros(f'{prefix}.static.wk', (dim, dim), adapter)
    init.xavier(f'{prefix}.static.wv', (dim, dim), adapter)
    init.xavier(f'{prefix}.static.wo', (dim, dim), adapter)
    init.zeros(f'{prefix}.static.mu', (1,), adapter)

    for w in ('wq', 'wk', 'wv', 'wo'):
        init.xavier(f'{prefix}.ground.{w}', (dim, dim), adapter)
    init.zeros(f'{prefix}.ground.gamma', (1,), adapter)

    init.xavier(f'{prefix}.image.wk', (dim, dim), adapter)
    init.xavier(f'{prefix}.image.wv', (dim, dim), adapter)


def _key_mask(mask: 'np.ndarray | None', queries: int, keys: int) -> np.ndarray | None:
    if mask is None:
        return None
    flat = np.asarray(getattr(mask, 'array', mask), dtype=np.float64).reshape(-1)
    if flat.size != keys:
        raise ShapeError('Static mask has %s entries for %s key tokens' % (flat.size, keys))
    return np.broadcast_to(flat, (queries, keys))


def static_attention(z: DiffNode, c_s: 'DiffNode | None', M_s: 'np.ndarray | None', params: AdapterParams) -> DiffNode:
    """SelfAttn(z) + mu * CrossAttn(z, c_s, M_s) * alpha

    `M_s` flags which of the `c_s` key tokens lie on the subject. Without
    static features the output is plain self-attention.
    """
    z = node(z)
    w = params.weights
    out = self_attention(z, w.scope('self')).out
    if c_s is None:
        return out

    c_s = node(c_s)
    if c_s.shape[1] != z.shape[1]:
        raise ShapeError('Static features have dim %s, latent tokens %s' % (c_s.shape[1], z.shape[1]))
    mask = _key_mask(M_s, z.shape[0], c_s.shape[0])
    cross = attend(z, c_s, w['static.wq'], w['static.wk'], w['static.wv'], w['static.wo'], mask).out
    return add(out, mul(scale(cross, params.alpha), params.mu))


def grounding_attention(z_s: DiffNode, g: 'DiffNode | None', params: AdapterParams) -> DiffNode:
    """z_s + beta * tanh(gamma) * SelfAttn([z_s; g])[:p^2]

    Only the visual rows are kept, so queries come from `z_s` alone while
    keys and values span the grounding tokens too.
    """
    z_s = node(z_s)
    w = params.weights.scope('ground')
    kv = z_s
    if g is not None:
        g = node(g)
        if g.shape[1] != z_s.shape[1]:
            raise ShapeError('Grounding tokens have dim %s, latent tokens %s' % (g.shape[1], z_s.shape[1]))
        kv = concat([z_s, g], axis=0)
    attended = attend(z_s, kv, w['wq'], w['wk'], w['wv'], w['wo']).out
    gate = scale(tanh(params.gamma), params.beta)
    return add(z_s, mul(attended, gate))


def dynamic_cross_attention(z_g: DiffNode, c_t: DiffNode, c_d: 'DiffNode | None', params: AdapterParams) -> tuple[DiffNode, DiffNode]:
    """CrossAttn(z_g, c_t) + lambda * CrossAttn(z_g, c_d) and the text map

    Both branches share the query and output projections; only the subject
    branch keys and values are adapter weights.
    """
    z_g, c_t = node(z_g), node(c_t)
    w = params.weights
    text = attend(z_g, c_t, w['text.wq'], w['text.wk'], w['text.wv'])
    mixed = text.mixed
    if c_d is not None:
        c_d = node(c_d)
        image = attend(z_g, c_d, w['text.wq'], w['image.wk'], w['image.wv'])
        mixed = add(mixed, scale(image.mixed, params.lambda_))
    return matmul(mixed, w['text.wo']), text.attn
