"""Multi-scale sliding-window face detection and chip extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boosting import Cascade, CascadeEvaluator
from .errors import ConfigurationError, FrameSizeError
from .haar import scaled_side
from .imagecore import GrayImage, Rect, crop_resize


@dataclass(frozen=True)
class DetectParams:
    scale_step: float = 1.25
    stride_factor: float = 0.05
    nms_iou: float = 0.3
    max_scales: int = 64

    def __post_init__(self):
        if not self.scale_step > 1.0:
            raise ConfigurationError("scale_step must exceed 1")
        if not 0 < self.stride_factor <= 1:
            raise ConfigurationError("stride_factor must lie in (0, 1]")
        if not 0 < self.nms_iou < 1:
            raise ConfigurationError("nms_iou must lie in (0, 1)")


@dataclass(frozen=True)
class Detection:
    rect: Rect
    score: float
    scale: float


def iou(a: Rect, b: Rect) -> float:
    return a.iou(b)


def nms(dets, iou_threshold: float = 0.3):
    """Greedy non-maximum suppression.

    Detections are visited by descending score (input order breaks ties);
    any detection overlapping a kept one with IoU above the threshold is
    dropped.
    """
    if not 0 < iou_threshold < 1:
        raise ConfigurationError("iou_threshold must lie in (0, 1)")
    dets = list(dets)
    if len(dets) < 2:
        return dets
    boxes = np.array([[d.rect.x, d.rect.y, d.rect.x2, d.rect.y2] for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        ix = np.clip(np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0]), 0, None)
        iy = np.clip(np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1]), 0, None)
        inter = ix * iy
        ov = inter / (areas[i] + areas[rest] - inter)
        order = rest[ov <= iou_threshold]
    return [dets[i] for i in keep]


def _frame_tables(frame: GrayImage):
    a = frame.data.astype(np.int64)
    t = np.pad(a.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    t2 = np.pad((a * a).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    return t, t2


def _box_sums(t, xs, ys, side):
    return (t[ys + side, xs + side] - t[ys, xs + side] - t[ys + side, xs] + t[ys, xs]).astype(np.float64)


def scan(frame: GrayImage, c: Cascade, params: DetectParams = DetectParams()):
    """All accepted windows before suppression, sorted by (scale, y, x).

    Also returns the total number of stage evaluations, for accounting.
    """
    if frame.width < c.base or frame.height < c.base:
        raise FrameSizeError(f"frame {frame.width}x{frame.height} smaller than the {c.base}px base window")
    t, t2 = _frame_tables(frame)
    ev = CascadeEvaluator(c)
    found = []
    work = 0
    for k in range(params.max_scales):
        scale = params.scale_step ** k
        side = scaled_side(c.base, scale)
        if side > frame.width or side > frame.height:
            break
        stride = max(1, int(round(params.stride_factor * side)))
        gx = np.arange(0, frame.width - side + 1, stride, dtype=np.intp)
        gy = np.arange(0, frame.height - side + 1, stride, dtype=np.intp)
        ys, xs = np.meshgrid(gy, gx, indexing="ij")
        xs, ys = xs.ravel(), ys.ravel()
        n = side * side
        norms = np.full(len(xs), float(n))
        if c.variance_normalization:
            s = _box_sums(t, xs, ys, side)
            sq = _box_sums(t2, xs, ys, side)
            var = (sq - s * s / n) / n
            norms *= np.where(var > 1e-12, np.sqrt(np.maximum(var, 0.0)), 1.0)
        accepted, evaluated, margins = ev.run(t, xs, ys, side, scale, norms)
        work += int(evaluated.sum())
        for j in np.nonzero(accepted)[0]:
            found.append(Detection(Rect(int(xs[j]), int(ys[j]), side, side), float(margins[j]), scale))
    return found, work


def detect(frame: GrayImage, c: Cascade, params: DetectParams = DetectParams()):
    """Detections after greedy non-maximum suppression."""
    found, _ = scan(frame, c, params)
    return nms(found, params.nms_iou)


def extract_chip(frame: GrayImage, d: Detection, size: int = 100) -> GrayImage:
    return crop_resize(frame, d.rect, size)


__all__ = ["DetectParams", "Detection", "iou", "nms", "scan", "detect", "extract_chip"]
