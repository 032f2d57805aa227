import itertools

import numpy as np
import pytest

from lcpdiff.autodiff import DiffNode
from lcpdiff.data import ShapeSpec, compose
from lcpdiff.evaluate import (
    APReport, Detection, GroundTruth, attention_in_box_ratio, average_precision, compute_ap, detect_blobs, iou,
    read_report, render_report, voc_ap
)
from lcpdiff.layout import AttentionLayer, AttentionStack, BoundingBox
from lcpdiff.utils import InputError

A = BoundingBox(0.0, 0.0, 0.5, 0.5)
B = BoundingBox(0.25, 0.25, 0.75, 0.75)
C = BoundingBox(0.5, 0.5, 1.0, 1.0)


def test_iou():
    assert iou(A, A) == 1.0
    assert iou(A, B) == pytest.approx(1.0 / 7.0)
    assert iou(A, C) == 0.0
    assert iou(A, B) == iou(B, A)


def test_perfect_detections():
    report = compute_ap([[Detection(A, 'red', 0.9)], [Detection(C, 'blue', 0.8)]], [[GroundTruth(A, 'red')], [GroundTruth(C, 'blue')]])
    assert report.ap == pytest.approx(1.0)
    assert report.ap50 == report.ap75 == pytest.approx(1.0)
    assert report.per_class == {'blue': pytest.approx(1.0), 'red': pytest.approx(1.0)}
    assert report.samples == 2


def test_no_detections():
    report = compute_ap([[], []], [[A], [C]])
    assert report.ap == 0.0 and report.ap50 == 0.0


def test_compute_ap_needs_aligned_sets():
    with pytest.raises(InputError):
        compute_ap([[]], [[A], [C]])
    with pytest.raises(InputError):
        compute_ap([[], []], [[], []])


def test_average_precision_by_hand():
    detections = [[Detection(A, 'red', 0.9), Detection(B, 'red', 0.8), Detection(C, 'red', 0.7)]]
    ap, recall = average_precision(detections, [[GroundTruth(A), GroundTruth(C)]], 0.5)
    assert ap == pytest.approx(5.0 / 6.0)
    assert recall == 1.0


def test_duplicate_detection_is_a_false_positive():
    detections = [[Detection(A, 'red', 0.9), Detection(A, 'red', 0.8)]]
    ap, _ = average_precision(detections, [[GroundTruth(A)]], 0.5)
    assert ap == pytest.approx(1.0)
    ap, _ = average_precision([[Detection(B, 'red', 0.9), Detection(A, 'red', 0.8)]], [[GroundTruth(A)]], 0.5)
    assert ap == pytest.approx(0.5)


def brute_force_ap(tp: list[int], total: int) -> float:
    """Interpolated precision integrated point by point over recall levels"""
    hits = np.cumsum(tp)
    recall = hits / total
    precision = hits / np.arange(1, len(tp) + 1)
    area, previous = 0.0, 0.0
    for r in sorted(set(recall.tolist())):
        if r == previous:
            continue
        area += (r - previous) * max(p for rr, p in zip(recall, precision) if rr >= r)
        previous = r
    return area


@pytest.mark.parametrize('tp', [tp for tp in itertools.product([0, 1], repeat=4) if any(tp)])
def test_voc_ap_matches_brute_force(tp):
    total = 4
    hits = np.cumsum(tp)
    got = voc_ap(hits / total, hits / np.arange(1, 5))
    assert got == pytest.approx(brute_force_ap(list(tp), total))


def greedy_oracle(dets: list[tuple[BoundingBox, float]], gts: list[BoundingBox], threshold: float) -> float:
    """Greedy matching then AP summed one true positive at a time"""
    ranked = sorted(dets, key=lambda d: -d[1])
    taken = set()
    flags = []
    for box, _ in ranked:
        free = [(iou(box, gt), -j) for j, gt in enumerate(gts) if j not in taken and iou(box, gt) >= threshold]
        if free:
            taken.add(-max(free)[1])
        flags.append(bool(free))
    area = 0.0
    for k, hit in enumerate(flags):
        if hit:
            area += max(sum(flags[:m + 1]) / (m + 1) for m in range(k, len(flags))) / len(gts)
    return area


def test_compute_ap_matches_exhaustive_oracle():
    boxes = [A, BoundingBox(0.0, 0.0, 0.5, 0.3), C]
    choices = [(box, conf) for box in boxes for conf in (0.9, 0.6)]
    for n_gt in range(1, 4):
        for gts in itertools.combinations_with_replacement(boxes, n_gt):
            for n_det in range(4):
                for dets in itertools.combinations_with_replacement(choices, n_det):
                    report = compute_ap(
                        [[Detection(box, 'red', conf) for box, conf in dets]],
                        [[GroundTruth(gt, 'red') for gt in gts]],
                        (0.5, 0.75)
                    )
                    ap50 = greedy_oracle(list(dets), list(gts), 0.5)
                    ap75 = greedy_oracle(list(dets), list(gts), 0.75)
                    assert report.ap50 == pytest.approx(ap50, abs=1e-12)
                    assert report.ap75 == pytest.approx(ap75, abs=1e-12)
                    assert report.ap == pytest.approx((ap50 + ap75) / 2, abs=1e-12)
                    assert report.per_class['red'] == pytest.approx(report.ap, abs=1e-12)


def test_equal_confidence_keeps_detection_order():
    gts = [[GroundTruth(A)]]
    first, _ = average_precision([[Detection(C, 'red', 0.5), Detection(A, 'red', 0.5)]], gts, 0.5)
    second, _ = average_precision([[Detection(A, 'red', 0.5), Detection(C, 'red', 0.5)]], gts, 0.5)
    assert first == pytest.approx(0.5)
    assert second == pytest.approx(1.0)


def test_detect_blobs_finds_the_placed_subject():
    spec = ShapeSpec('square', 'red', 0.25)
    image, mask = compose(32, [(spec, (4, 12))])
    detections = detect_blobs(image)
    assert len(detections) == 1
    found = detections[0]
    assert found.color == 'red' and found.shape == 'square'
    assert found.box == BoundingBox.from_mask(mask.array)
    assert found.confidence == pytest.approx(64 / 1024)


def test_detect_blobs_drops_specks():
    spec = ShapeSpec('circle', 'blue', 0.15)
    image, _ = compose(16, [(spec, (0, 0))])
    assert detect_blobs(image, min_blob=100) == []
    with pytest.raises(InputError):
        detect_blobs(np.full((3, 4, 4), 2.0))


def test_detect_two_colours():
    image, _ = compose(32, [(ShapeSpec('square', 'red', 0.2), (1, 1)), (ShapeSpec('circle', 'cyan', 0.3), (18, 18))])
    assert sorted(d.color for d in detect_blobs(image)) == ['cyan', 'red']


def test_attention_in_box_ratio():
    attn = np.full((64, 2), 0.5)
    stack = AttentionStack([AttentionLayer(DiffNode.constant(attn), 8, 0)], t=0)
    assert attention_in_box_ratio(stack, [(0, A), (1, BoundingBox(0.0, 0.0, 1.0, 1.0))]) == pytest.approx([0.25, 1.0])


def test_report_round_trip(tmp_path):
    report = compute_ap([[Detection(A, 'red', 0.9)]], [[GroundTruth(A, 'red'), GroundTruth(C, 'red')]])
    image, _ = compose(16, [(ShapeSpec('square', 'red', 0.25), (2, 2))])
    data = render_report({'guided': report}, str(tmp_path), [image], [[A]], extra={'attention_in_box': {'guided': 0.5}})
    assert (tmp_path / 'contact.png').exists()
    assert data['attention_in_box'] == {'guided': 0.5}
    restored = read_report(str(tmp_path))
    assert restored['guided'].eval() == report.eval()
    assert APReport.from_dict(report.eval()).eval() == report.eval()
