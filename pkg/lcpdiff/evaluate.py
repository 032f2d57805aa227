"""
Layout-fidelity evaluation: a palette blob detector, box IoU, average
precision over an IoU sweep and the report writers.
"""
import json
import os
from typing import Any, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .config import REPORT_VERSION, EvalConfig, GuidanceConfig
from .interfaces import Object
from .layout import Assignment, AttentionStack, BoundingBox, box_to_mask, in_box_ratio, token_map
from .tensor import Tensor, as_array
from .utils import BACKGROUND, PALETTE, InputError, color_values

BACKGROUND_CLASS = 'background'


class Detection(Object):
    def __init__(self, box: BoundingBox, color: str, confidence: float, shape: str | None = None) -> None:
        if not 0.0 <= confidence <= 1.0:
            raise InputError('Confidence must lie in [0, 1]')
        self.box = box
        self.color = color
        self.confidence = confidence
        self.shape = shape

    def eval(self) -> dict[str, Any]:
        return {
            'box': self.box.eval(),
            'color': self.color,
            'confidence': self.confidence,
            'shape': self.shape
        }

    def __repr__(self) -> str:
        return f'Detection({self.color} {self.shape}, {self.box}, confidence={self.confidence:.4f})'


class GroundTruth:
    def __init__(self, box: BoundingBox, color: str | None = None) -> None:
        self.box = box
        self.color = color


# DETECTION

def _classes(channels: int) -> tuple[list[str], np.ndarray]:
    names = [*PALETTE, BACKGROUND_CLASS]
    values = np.stack([color_values(c, channels) for c in (*PALETTE.values(), BACKGROUND)])
    return names, values


def quantize(image: 'Tensor | np.ndarray') -> np.ndarray:
    """Index of the nearest palette or background colour per pixel"""
    pixels = as_array(image)
    _, values = _classes(pixels.shape[0])
    flat = pixels.reshape(pixels.shape[0], -1).T
    distance = ((flat[:, None, :] - values[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(distance, axis=1).reshape(pixels.shape[1:])


def guess_shape(component: np.ndarray) -> str:
    rows = np.flatnonzero(component.any(axis=1))
    cols = np.flatnonzero(component.any(axis=0))
    crop = component[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    fill = crop.mean()
    if fill > 0.9:
        return 'square'
    if fill > 0.7:
        return 'circle'
    return 'triangle' if crop[0].sum() < crop[-1].sum() else 'cross'


def detect_blobs(image: 'Tensor | np.ndarray', min_blob: int = 9) -> list[Detection]:
    """Connected components per palette colour; background and specks dropped"""
    pixels = as_array(image)
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise InputError('Image values must lie in [0, 1]')

    names, _ = _classes(pixels.shape[0])
    labels = quantize(pixels)
    total = labels.size
    detections = []
    for index, name in enumerate(names):
        if name == BACKGROUND_CLASS:
            continue
        components, count = ndimage.label(labels == index)
        for i in range(1, count + 1):
            component = components == i
            area = int(component.sum())
            if area < min_blob:
                continue
            detections.append(Detection(BoundingBox.from_mask(component), name, area / total, guess_shape(component)))
    return detections


# METRICS

def iou(a: BoundingBox, b: BoundingBox) -> float:
    w = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    h = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = w * h
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope (all-point interpolation)"""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))

    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])

    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_detections(
        detections: Sequence[Sequence[Detection]],
        ground_truths: Sequence[Sequence[GroundTruth]],
        threshold: float
    ) -> tuple[np.ndarray, int]:
    """True-positive flags in confidence order and the ground-truth count

    Each detection takes the unmatched ground truth of highest IoU at or
    above `threshold`; equal confidences keep detection order.
    """
    flat = [(img, det) for img, dets in enumerate(detections) for det in dets]
    order = np.argsort([-det.confidence for _, det in flat], kind='stable')
    matched = [np.zeros(len(gts), dtype=bool) for gts in ground_truths]

    tp = np.zeros(len(flat))
    for rank, index in enumerate(order):
        img, det = flat[index]
        best, best_iou = -1, threshold
        for j, gt in enumerate(ground_truths[img]):
            if matched[img][j]:
                continue
            overlap = iou(det.box, gt.box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            matched[img][best] = True
            tp[rank] = 1.0
    return tp, sum(len(gts) for gts in ground_truths)


def average_precision(
        detections: Sequence[Sequence[Detection]],
        ground_truths: Sequence[Sequence[GroundTruth]],
        threshold: float
    ) -> tuple[float, float]:
    """(AP, recall) at one IoU threshold"""
    tp, total = match_detections(detections, ground_truths, threshold)
    if total == 0:
        return 0.0, 0.0
    if tp.size == 0:
        return 0.0, 0.0
    hits = np.cumsum(tp)
    recall = hits / total
    precision = hits / np.arange(1, tp.size + 1)
    return voc_ap(recall, precision), float(hits[-1] / total)


class APReport(Object):
    def __init__(
            self,
            ap: float,
            ap50: float,
            ap75: float,
            per_class: dict[str, float],
            samples: int,
            per_threshold: dict[str, float] | None = None,
            recall50: float = 0.0
        ) -> None:
        self.ap = ap
        self.ap50 = ap50
        self.ap75 = ap75
        self.per_class = per_class
        self.samples = samples
        self.per_threshold = per_threshold or {}
        self.recall50 = recall50

    @staticmethod
    def from_dict(data: dict[str, Any]) -> 'APReport':
        return APReport(
            data['ap'], data['ap50'], data['ap75'], data['per_class'], data['samples'],
            data.get('per_threshold'), data.get('recall50', 0.0)
        )

    def eval(self) -> dict[str, Any]:
        return {
            'ap': self.ap,
            'ap50': self.ap50,
            'ap75': self.ap75,
            'recall50': self.recall50,
            'per_class': dict(sorted(self.per_class.items())),
            'per_threshold': self.per_threshold,
            'samples': self.samples
        }


def compute_ap(
        detections: Sequence[Sequence[Detection]],
        ground_truths: Sequence[Sequence[GroundTruth | BoundingBox]],
        thresholds: Sequence[float] = EvalConfig().thresholds
    ) -> APReport:
    """Class-agnostic AP over the threshold sweep plus a per-colour breakdown"""
    if not ground_truths or len(detections) != len(ground_truths):
        raise InputError('compute_ap needs aligned, non-empty image sets')
    gts = [[gt if isinstance(gt, GroundTruth) else GroundTruth(gt) for gt in image] for image in ground_truths]
    if not any(gts):
        raise InputError('Evaluation set holds no ground truth')

    per_threshold = {'%.2f' % t: average_precision(detections, gts, t)[0] for t in thresholds}
    ap50, recall50 = average_precision(detections, gts, 0.5)
    ap75, _ = average_precision(detections, gts, 0.75)

    per_class = {}
    for color in sorted({gt.color for image in gts for gt in image if gt.color is not None}):
        class_dets = [[d for d in image if d.color == color] for image in detections]
        class_gts = [[g for g in image if g.color == color] for image in gts]
        per_class[color] = float(np.mean([average_precision(class_dets, class_gts, t)[0] for t in thresholds]))

    return APReport(float(np.mean(list(per_threshold.values()))), ap50, ap75, per_class, len(gts), per_threshold, recall50)


def attention_in_box_ratio(stack: AttentionStack, assignments: Sequence[Assignment], config: GuidanceConfig | None = None) -> list[float]:
    """Share of each assigned token's attention mass that falls inside its box"""
    config = config or GuidanceConfig()
    aggregated, p = stack.aggregate(config.loss_layers)
    return [
        in_box_ratio(token_map(aggregated, p, k), box_to_mask(box, p).array).item()
        for k, box in assignments
    ]


# REPORTS

def contact_sheet(
        images: Sequence['Tensor | np.ndarray'],
        boxes: Sequence[Sequence[BoundingBox]],
        columns: int = 8,
        scale: int = 4
    ) -> Image.Image:
    """Grid of images, each with its requested boxes drawn at scaled pixel edges"""
    if not images:
        raise InputError('Contact sheet needs at least one image')
    first = as_array(images[0])
    h, w = first.shape[1] * scale, first.shape[2] * scale
    columns = max(1, min(columns, len(images)))
    rows = (len(images) + columns - 1) // columns
    sheet = Image.new('RGB', (columns * w, rows * h), (0, 0, 0))

    for i, (image, image_boxes) in enumerate(zip(images, boxes)):
        pixels = np.clip(np.round(as_array(image) * 255.0), 0, 255).astype(np.uint8)
        if pixels.shape[0] == 1:
            pixels = np.repeat(pixels, 3, axis=0)
        tile = Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).resize((w, h), Image.NEAREST)
        draw = ImageDraw.Draw(tile)
        for box in image_boxes:
            x0, y0, x1, y1 = box.to_pixels(w, h)
            draw.rectangle((x0, y0, x1 - 1, y1 - 1), outline=(255, 255, 255))
        sheet.paste(tile, ((i % columns) * w, (i // columns) * h))
    return sheet


def render_report(
        reports: dict[str, APReport],
        path: str,
        images: Sequence['Tensor | np.ndarray'] = (),
        boxes: Sequence[Sequence[BoundingBox]] = (),
        config: EvalConfig | None = None,
        extra: dict[str, Any] | None = None
    ) -> dict[str, Any]:
    """`report.json` with one column per report and `contact.png` when images are given"""
    if not reports:
        raise InputError('render_report needs at least one report')
    config = config or EvalConfig()
    os.makedirs(path, exist_ok=True)

    data = {
        'version': REPORT_VERSION,
        'columns': {name: report.eval() for name, report in reports.items()},
        **(extra or {})
    }
    with open(os.path.join(path, 'report.json'), 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)

    if images:
        contact_sheet(images, boxes, config.contact_columns, config.contact_scale).save(os.path.join(path, 'contact.png'))
    return data


def read_report(path: str) -> dict[str, APReport]:
    file = os.path.join(path, 'report.json') if os.path.isdir(path) else path
    with open(file, encoding='utf-8') as f:
        data = json.load(f)
    return {name: APReport.from_dict(column) for name, column in data['columns'].items()}
