import numpy as np
import pytest

from lcpdiff.autodiff import DiffNode, power, scale, sum_
from lcpdiff.config import GuidanceConfig
from lcpdiff.layout import (
    AttentionLayer, AttentionStack, BoundingBox, axis_loss, axis_project, box_to_mask, build_grounding_tokens,
    corner_masks, guided_update, layout_loss, position_loss, scale_loss, step_size
)
from lcpdiff.tensor import FourierSpec, Tensor
from lcpdiff.utils import DegenerateCornerError, GuidanceDivergenceError, InputError, ShapeError


def uniform_stack(p: int = 8, n: int = 3) -> AttentionStack:
    return AttentionStack([AttentionLayer(DiffNode.constant(np.full((p * p, n), 1.0 / n)), p, 0)], t=0)


def peaked_stack(p: int, n: int, k: int, cells: list[tuple[int, int]]) -> AttentionStack:
    """Token k holds all of its mass on `cells`; the other tokens share the rest"""
    attn = np.full((p * p, n), 1.0 / n)
    for r, c in cells:
        attn[r * p + c] = 0.0
        attn[r * p + c, k] = 1.0
    return AttentionStack([AttentionLayer(DiffNode.constant(attn), p, 0)], t=0)


def test_box_validation():
    with pytest.raises(InputError):
        BoundingBox(0.5, 0.0, 0.5, 1.0)
    with pytest.raises(InputError):
        BoundingBox(0.0, 0.0, 1.2, 1.0)
    with pytest.raises(InputError):
        BoundingBox.from_list([0.0, 0.0, 1.0])


def test_box_from_mask():
    mask = np.zeros((8, 8))
    mask[2:4, 1:7] = 1
    assert BoundingBox.from_mask(mask) == BoundingBox(1 / 8, 2 / 8, 7 / 8, 4 / 8)


def test_box_to_mask():
    assert box_to_mask(BoundingBox(0.0, 0.0, 1.0, 1.0), 4).array.sum() == 16
    quarter = box_to_mask(BoundingBox(0.0, 0.0, 0.5, 0.5), 8).array
    assert quarter.sum() == 16
    assert quarter[:4, :4].all()


def test_tiny_box_snaps_to_one_cell():
    mask = box_to_mask(BoundingBox(0.49, 0.49, 0.51, 0.51), 4).array
    assert mask.sum() == 1
    assert mask[2, 2] == 1


def test_box_to_mask_needs_grid():
    with pytest.raises(ShapeError):
        box_to_mask(BoundingBox(0.0, 0.0, 1.0, 1.0), 1)


def test_corner_masks():
    corners = corner_masks(BoundingBox(0.0, 0.0, 1.0, 1.0), 8, 0.25)
    assert len(corners) == 4
    for corner in corners:
        assert corner.array.sum() == 4
    assert corners[0].array[:2, :2].all()
    with pytest.raises(ShapeError):
        corner_masks(BoundingBox(0.0, 0.0, 1.0, 1.0), 8, 0.6)


def test_position_loss_uniform_map():
    stack = uniform_stack()
    assert position_loss(stack, [(1, BoundingBox(0.0, 0.0, 0.5, 0.5))]).item() == pytest.approx(0.5625)
    assert position_loss(stack, [(1, BoundingBox(0.0, 0.0, 1.0, 0.5))]).item() == pytest.approx(0.25)


def test_position_loss_sums_over_subjects():
    stack = uniform_stack()
    box = BoundingBox(0.0, 0.0, 0.5, 0.5)
    both = position_loss(stack, [(0, box), (2, box)]).item()
    assert both == pytest.approx(2 * 0.5625)


def test_position_loss_two_subjects_half_inside():
    stack = uniform_stack(8, 2)
    left, top = BoundingBox(0.0, 0.0, 0.5, 1.0), BoundingBox(0.0, 0.0, 1.0, 0.5)
    assert position_loss(stack, [(0, left), (1, top)]).item() == pytest.approx(0.5)


def test_position_loss_peaked_token():
    stack = peaked_stack(4, 3, 1, [(0, 0), (0, 1), (1, 0), (1, 1)])
    # the peaked token also receives 1/3 from every other cell
    expected = (1.0 - 4.0 / (4.0 + 12.0 / 3.0)) ** 2
    assert position_loss(stack, [(1, BoundingBox(0.0, 0.0, 0.5, 0.5))]).item() == pytest.approx(expected)


def test_stack_rejects_unnormalised_rows():
    with pytest.raises(ShapeError):
        AttentionStack([AttentionLayer(DiffNode.constant(np.ones((16, 2))), 4, 0)], t=0)


def test_stack_aggregates_levels():
    fine = AttentionLayer(DiffNode.constant(np.full((16, 2), 0.5)), 4, 0)
    coarse = np.tile([0.25, 0.75], (4, 1))
    stack = AttentionStack([fine, AttentionLayer(DiffNode.constant(coarse), 2, 1)], t=3)
    aggregated, p = stack.aggregate()
    assert p == 4
    assert np.allclose(aggregated.array, np.tile([0.375, 0.625], (16, 1)))
    assert stack.aggregate([1])[1] == 2
    with pytest.raises(InputError):
        stack.select([7])


def test_axis_project_hard():
    m = np.zeros((8, 8))
    m[2, 5] = 1.0
    x, y = axis_project(Tensor(m))
    assert x.array.tolist() == np.eye(8)[5].tolist()
    assert y.array.tolist() == np.eye(8)[2].tolist()


def test_axis_project_smooth_upper_bounds_max():
    m = np.random.default_rng(0).random((4, 4))
    x, _ = axis_project(Tensor(m), smooth=True, temperature=0.01)
    assert np.all(x.array >= m.max(axis=0) - 1e-12)
    assert np.all(x.array <= m.max(axis=0) + 0.01 * np.log(4) + 1e-12)


def test_axis_loss():
    ones = np.array([1.0, 1.0, 0.0, 0.0])
    single = axis_loss([DiffNode.constant(np.array([0.5, 1.0, 0.0, 0.0]))], [ones], [ones], 2.0)
    assert single.item() == pytest.approx(0.25)
    with pytest.raises(DegenerateCornerError):
        axis_loss([DiffNode.constant(ones)], [ones], [ones], 0.0)


def test_scale_loss_symmetric_map():
    stack = uniform_stack(8, 3)
    box = BoundingBox(0.25, 0.25, 0.75, 0.75)
    config = GuidanceConfig(smooth=False)
    total = scale_loss(stack, [(0, box)], config).item()

    aggregated = np.full((8, 8), 1.0 / 3.0)
    mask = box_to_mask(box, 8).array
    corners = np.maximum.reduce([c.array for c in corner_masks(box, 8, config.corner_ratio)])
    v = corners.max(axis=0)
    l_x = (v * np.abs(aggregated.max(axis=0) - mask.max(axis=0))).sum() / np.count_nonzero(v)
    assert total == pytest.approx(2 * l_x)


def test_layout_loss_zero_for_matching_box():
    attn = np.tile([0.5, 0.0, 0.5], (64, 1))
    for r in range(2, 6):
        for c in range(2, 6):
            attn[r * 8 + c] = [0.0, 1.0, 0.0]
    stack = AttentionStack([AttentionLayer(DiffNode.constant(attn), 8, 0)], t=0)
    total, pos, sc = layout_loss(stack, [(1, BoundingBox(0.25, 0.25, 0.75, 0.75))], GuidanceConfig(smooth=False))
    assert pos.item() == pytest.approx(0.0)
    assert sc.item() == pytest.approx(0.0)
    assert total.item() == pytest.approx(0.0)


def test_layout_loss_is_the_sum():
    stack = uniform_stack()
    assignments = [(1, BoundingBox(0.0, 0.0, 0.5, 0.5))]
    total, pos, sc = layout_loss(stack, assignments)
    assert total.item() == pytest.approx(pos.item() + sc.item())


def test_step_size():
    assert step_size(49, 50, 2.0) == pytest.approx(2.0)
    assert step_size(0, 50, 2.0) == pytest.approx(2.0 / 50)
    assert step_size(49, 100, 1.0) == pytest.approx(0.5)
    with pytest.raises(InputError):
        step_size(50, 50, 1.0)


def test_guided_update_eta_zero_returns_latent():
    z = Tensor(np.arange(4.0))
    leaf = DiffNode.leaf(z, requires_grad=True)
    loss = sum_(power(leaf, 2.0))
    assert guided_update(leaf, loss, 0.5, 0.0) == z


def test_guided_update_quadratic():
    z = np.array([1.0, -2.0, 3.0])
    leaf = DiffNode.leaf(z, requires_grad=True)
    loss = scale(sum_(power(leaf, 2.0)), 0.5)
    out = guided_update(leaf, loss, 0.1, 2.0)
    assert np.allclose(out.array, z * (1.0 - 0.1 * 2.0))


def test_guided_update_overflow():
    leaf = DiffNode.leaf(np.array([1.0]), requires_grad=True)
    loss = sum_(power(leaf, 2.0))
    with pytest.raises(GuidanceDivergenceError):
        guided_update(leaf, loss, 1e200, 1e200)


def test_grounding_tokens(params):
    d = params.config.dim
    weights = params.bind().scope('grounding')
    spec = FourierSpec(params.config.fourier_frequencies)
    c_s, c_e = Tensor(np.ones(d)), Tensor(np.ones((1, d)))

    one = build_grounding_tokens([(c_s, c_e, BoundingBox(0.0, 0.0, 0.5, 0.5))], spec, weights)
    assert one.tokens.shape == [1, d]

    two = build_grounding_tokens(
        [(c_s, c_e, BoundingBox(0.0, 0.0, 0.5, 0.5)), (c_s, c_e, BoundingBox(0.5, 0.5, 1.0, 1.0))], spec, weights
    )
    assert len(two) == 2
    assert np.allclose(two.tokens.array[0], one.tokens.array[0])
    assert not np.allclose(two.tokens.array[0], two.tokens.array[1])

    with pytest.raises(InputError):
        build_grounding_tokens([], spec, weights)
