"""
Dual layout control: grounding tokens for training-time conditioning and the
box-constrained cross-attention losses that steer the latent at inference.
"""
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (
    DiffNode, abs_, add, backward, concat, gelu, hard_max, linear, logsumexp_max, mul,
    node, power, reshape, scale, sub, sum_, take
)
from .config import GuidanceConfig
from .enums import CornerNorm, ParamGroup, Projection
from .interfaces import Object
from .params import Initializer, Weights
from .tensor import FourierSpec, Tensor, fourier_encode_box
from .utils import (
    DegenerateCornerError, DegenerateDistributionError, GuidanceDivergenceError, InputError,
    NonFiniteError, ShapeError
)


class BoundingBox(Object):
    @staticmethod
    def from_list(data: Sequence[float]) -> 'BoundingBox':
        if len(data) != 4:
            raise InputError('A box needs four coordinates, got %s' % len(data))
        return BoundingBox(*data)

    @staticmethod
    def from_mask(mask: np.ndarray) -> 'BoundingBox':
        """Tight extent of the foreground, in pixel-edge normalized coordinates"""
        mask = np.asarray(mask) != 0
        if not mask.any():
            raise InputError('Cannot box an empty mask')
        h, w = mask.shape
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        return BoundingBox(cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)

    def __init__(self, x0: float, y0: float, x1: float, y1: float) -> None:
        self.x0, self.y0, self.x1, self.y1 = float(x0), float(y0), float(x1), float(y1)
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise InputError('Invalid box %s: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1' % (self.coords,))

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return self.x0, self.y0, self.x1, self.y1

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    @property
    def vertices(self) -> list[tuple[float, float]]:
        return [(self.x0, self.y0), (self.x1, self.y0), (self.x0, self.y1), (self.x1, self.y1)]

    def to_pixels(self, width: int, height: int) -> tuple[int, int, int, int]:
        return (
            int(round(self.x0 * width)), int(round(self.y0 * height)),
            int(round(self.x1 * width)), int(round(self.y1 * height))
        )

    def eval(self) -> list[float]:
        return list(self.coords)

    def __iter__(self):
        return iter(self.coords)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BoundingBox) and other.coords == self.coords

    def __hash__(self) -> int:
        return hash(self.coords)

    def __repr__(self) -> str:
        return 'BoundingBox(%.4g, %.4g, %.4g, %.4g)' % self.coords


Assignment = tuple[int, BoundingBox]


class GroundingTokens:
    def __init__(self, tokens: DiffNode) -> None:
        if tokens.value.rank != 2:
            raise ShapeError('Grounding tokens must be [K x d]')
        self.tokens = tokens

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    def __len__(self) -> int:
        return self.count


class AttentionLayer:
    def __init__(self, text_attn: DiffNode, p: int, block: int) -> None:
        if text_attn.shape[0] != p * p:
            raise ShapeError('Attention map has %s rows, expected %s' % (text_attn.shape[0], p * p))
        self.text_attn = text_attn
        self.p = p
        self.block = block


class AttentionStack:
    """Text-branch cross-attention maps of one denoiser pass at timestep `t`"""

    def __init__(
            self,
            layers: Iterable[AttentionLayer],
            t: int,
            self_values: list[tuple[int, int, np.ndarray]] | None = None
        ) -> None:
        self.layers = list(layers)
        self.t = t
        self.self_values = self_values or []

        for layer in self.layers:
            sums = layer.text_attn.array.sum(axis=1)
            if not np.allclose(sums, 1.0, rtol=0.0, atol=1e-9):
                raise ShapeError('Attention map rows of block %s do not sum to 1' % layer.block)

    @property
    def token_count(self) -> int:
        return self.layers[0].text_attn.shape[1]

    def select(self, blocks: Sequence[int] = ()) -> list[AttentionLayer]:
        if not blocks:
            return self.layers
        chosen = [layer for layer in self.layers if layer.block in blocks]
        if not chosen:
            raise InputError('No attention layer matches blocks %s' % list(blocks))
        return chosen

    def aggregate(self, blocks: Sequence[int] = ()) -> tuple[DiffNode, int]:
        """Average of the chosen maps at the finest chosen resolution

        Coarser maps are upsampled by nearest neighbour.
        """
        chosen = self.select(blocks)
        p = max(layer.p for layer in chosen)
        n = self.token_count

        total = None
        for layer in chosen:
            m = layer.text_attn
            if layer.p != p:
                m = take(m, upsample_index(layer.p, p, n))
            total = m if total is None else add(total, m)
        return scale(total, 1.0 / len(chosen)), p


def upsample_index(p_from: int, p_to: int, n: int) -> np.ndarray:
    cells = np.arange(p_to) * p_from // p_to
    rows = (cells[:, None] * p_from + cells[None, :]).reshape(-1)
    return rows[:, None] * n + np.arange(n)[None, :]


def token_map(aggregated: DiffNode, p: int, k: int) -> DiffNode:
    n = aggregated.shape[1]
    if not 0 <= k < n:
        raise InputError('Token index %s outside prompt of %s tokens' % (k, n))
    return take(aggregated, np.arange(p * p) * n + k)


# RASTERIZATION

def _centers(p: int) -> np.ndarray:
    return (np.arange(p) + 0.5) / p


def _snap(v: float, p: int) -> int:
    return min(int(v * p), p - 1)


def box_to_mask(box: BoundingBox, p: int) -> Tensor:
    if p < 2:
        raise ShapeError('Grid size must be >= 2')
    c = _centers(p)
    cols = (c >= box.x0) & (c <= box.x1)
    rows = (c >= box.y0) & (c <= box.y1)
    mask = np.outer(rows, cols).astype(np.float64)
    if not mask.any():
        cx, cy = box.center
        mask[_snap(cy, p), _snap(cx, p)] = 1.0
    return Tensor.wrap(mask)


def corner_masks(box: BoundingBox, p: int, ratio: float) -> list[Tensor]:
    if not 0.0 < ratio <= 0.5:
        raise ShapeError('Corner ratio must lie in (0, 0.5]')
    half = ratio * min(box.width, box.height)
    c = _centers(p)
    out = []
    for vx, vy in box.vertices:
        cols = np.abs(c - vx) <= half
        rows = np.abs(c - vy) <= half
        mask = np.outer(rows, cols).astype(np.float64)
        if not mask.any():
            mask[_snap(vy, p), _snap(vx, p)] = 1.0
        out.append(Tensor.wrap(mask))
    return out


# POSITION LOSS

def in_box_ratio(column: DiffNode, mask: np.ndarray) -> DiffNode:
    total = sum_(column)
    if total.item() <= 0.0:
        raise DegenerateDistributionError('Token attention has zero total mass')
    inside = sum_(mul(column, np.asarray(mask, dtype=np.float64).reshape(column.shape)))
    return mul(inside, power(total, -1.0))


def position_loss_from_maps(columns: Sequence[DiffNode], masks: Sequence[np.ndarray]) -> DiffNode:
    loss = None
    for column, mask in zip(columns, masks):
        term = power(sub(1.0, in_box_ratio(column, mask)), 2.0)
        loss = term if loss is None else add(loss, term)
    if loss is None:
        raise InputError('position_loss needs at least one assignment')
    return loss


def position_loss(stack: AttentionStack, assignments: Sequence[Assignment], config: GuidanceConfig | None = None) -> DiffNode:
    config = config or GuidanceConfig()
    aggregated, p = stack.aggregate(config.loss_layers)
    columns = [token_map(aggregated, p, k) for k, _ in assignments]
    masks = [box_to_mask(box, p).array for _, box in assignments]
    return position_loss_from_maps(columns, masks)


# SCALE LOSS

def axis_project(map: Tensor, smooth: bool = False, temperature: float = 0.01, projection: str = Projection.MAX) -> tuple[Tensor, Tensor]:
    if map.rank != 2 or map.shape[0] != map.shape[1]:
        raise ShapeError('axis_project expects a square map, got %s' % map.shape)
    x, y = project_node(DiffNode.constant(map), smooth, temperature, projection)
    return x.value, y.value


def project_node(map: DiffNode, smooth: bool = True, temperature: float = 0.01, projection: str = Projection.MAX) -> tuple[DiffNode, DiffNode]:
    """(x profile over columns, y profile over rows) of a [p x p] map"""
    match projection:
        case Projection.MAX if smooth:
            return logsumexp_max(map, 0, temperature), logsumexp_max(map, 1, temperature)
        case Projection.MAX:
            return hard_max(map, 0), hard_max(map, 1)
        case Projection.SUM:
            x, y = sum_(map, axis=0), sum_(map, axis=1)
            total = sum_(map)
            if total.item() <= 0.0:
                return x, y
            inv = power(total, -1.0)
            return mul(x, inv), mul(y, inv)
        case _:
            raise InputError('Unknown projection: %s' % projection)


def _mask_profiles(mask: np.ndarray, projection: str) -> tuple[np.ndarray, np.ndarray]:
    if projection == Projection.SUM:
        total = mask.sum()
        return mask.sum(axis=0) / total, mask.sum(axis=1) / total
    return mask.max(axis=0), mask.max(axis=1)


def axis_loss(a: Sequence[DiffNode], m: Sequence[np.ndarray], v: Sequence[np.ndarray], norm: float) -> DiffNode:
    """(1 / norm) * sum_k sum_j v_k(j) * |a_k(j) - m_k(j)|"""
    if norm <= 0:
        raise DegenerateCornerError('Corner support is empty')
    total = None
    for a_k, m_k, v_k in zip(a, m, v):
        term = sum_(mul(abs_(sub(a_k, m_k)), v_k))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / norm)


def scale_loss(stack: AttentionStack, assignments: Sequence[Assignment], config: GuidanceConfig | None = None) -> DiffNode:
    config = config or GuidanceConfig()
    if not assignments:
        raise InputError('scale_loss needs at least one assignment')
    aggregated, p = stack.aggregate(config.loss_layers)

    a_x, a_y, m_x, m_y, v_x, v_y = [], [], [], [], [], []
    for k, box in assignments:
        attn = reshape(token_map(aggregated, p, k), [p, p])
        ax, ay = project_node(attn, config.smooth, config.temperature, config.projection)
        mx, my = _mask_profiles(box_to_mask(box, p).array, config.projection)
        corners = np.maximum.reduce([c.array for c in corner_masks(box, p, config.corner_ratio)])

        a_x.append(ax)
        a_y.append(ay)
        m_x.append(mx)
        m_y.append(my)
        v_x.append(corners.max(axis=0))
        v_y.append(corners.max(axis=1))

    match config.corner_norm:
        case CornerNorm.CORNER:
            n_x = float(np.count_nonzero(np.maximum.reduce(v_x)))
            n_y = float(np.count_nonzero(np.maximum.reduce(v_y)))
        case _:
            n_x = float(sum(np.count_nonzero(box_to_mask(b, p).array.max(axis=0)) for _, b in assignments))
            n_y = float(sum(np.count_nonzero(box_to_mask(b, p).array.max(axis=1)) for _, b in assignments))

    return add(axis_loss(a_x, m_x, v_x, n_x), axis_loss(a_y, m_y, v_y, n_y))


def layout_loss(stack: AttentionStack, assignments: Sequence[Assignment], config: GuidanceConfig | None = None) -> tuple[DiffNode, DiffNode, DiffNode]:
    """(L_pos + L_scale, L_pos, L_scale)"""
    pos = position_loss(stack, assignments, config)
    sc = scale_loss(stack, assignments, config)
    return add(pos, sc), pos, sc


# GUIDED UPDATE

def step_size(t: int, T: int, alpha0: float) -> float:
    if not 0 <= t < T:
        raise InputError('step_size needs 0 <= t < T, got t=%s T=%s' % (t, T))
    return alpha0 * (t + 1) / T


def guided_update(z_t: DiffNode, loss: DiffNode, alpha_t: float, eta: float) -> Tensor:
    """z_t - alpha_t * eta * grad(loss, z_t)"""
    if eta == 0:
        return z_t.value
    backward(loss)
    grad = z_t.grad_array
    if grad is None:
        return z_t.value
    if not np.all(np.isfinite(grad)):
        raise GuidanceDivergenceError(
            'Non-finite layout gradient (loss=%s, alpha_t=%s, eta=%s)' % (loss.item(), alpha_t, eta)
        )
    try:
        return Tensor.wrap(z_t.array - alpha_t * eta * grad)
    except NonFiniteError as e:
        raise GuidanceDivergenceError('Guided latent overflowed (alpha_t=%s, eta=%s)' % (alpha_t, eta)) from e


# GROUNDING TOKENS

def init_grounding(init: Initializer, dim: int, spec: FourierSpec, hidden: int) -> None:
    group = ParamGroup.GROUNDING
    for half in ('visual', 'text'):
        init.xavier(f'grounding.{half}.w1', (dim + spec.dim, hidden), group)
        init.zeros(f'grounding.{half}.b1', (hidden,), group)
        init.xavier(f'grounding.{half}.w2', (hidden, dim), group)
        init.zeros(f'grounding.{half}.b2', (dim,), group)
    init.xavier('grounding.out.w', (2 * dim, dim), group)
    init.zeros('grounding.out.b', (dim,), group)


def _mlp(x: DiffNode, w: Weights) -> DiffNode:
    return linear(gelu(linear(x, w['w1'], w['b1'])), w['w2'], w['b2'])


def build_grounding_tokens(
        subjects: Sequence[tuple['DiffNode | Tensor', 'DiffNode | Tensor', BoundingBox]],
        spec: FourierSpec,
        weights: Weights
    ) -> GroundingTokens:
    """One token per (pooled c_s, entity embedding c_e, box)

    `weights` is the `grounding` scope of the bound parameters.
    """
    if not subjects:
        raise InputError('build_grounding_tokens needs at least one subject')

    tokens = []
    for c_s, c_e, box in subjects:
        c_s, c_e = node(c_s), node(c_e)
        f = DiffNode.constant(fourier_encode_box(box, spec).array.reshape(1, -1))
        visual = _mlp(concat([reshape(c_s, [1, c_s.value.array.size]), f], axis=1), weights.scope('visual'))
        text = _mlp(concat([reshape(c_e, [1, c_e.value.array.size]), f], axis=1), weights.scope('text'))
        tokens.append(linear(concat([visual, text], axis=1), weights['out.w'], weights['out.b']))
    return GroundingTokens(concat(tokens, axis=0))
