"""
Box and point arithmetic shared by the detector, fusion and evaluation code.

Boxes use continuous pixel coordinates (x1, y1, x2, y2) with the origin at
the top-left corner, x to the right and y down. Areas are (x2-x1)*(y2-y1).
"""

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_center(cls, cx, cy, size):
        half = size / 2.0
        return cls(cx - half, cy - half, cx + half, cy + half)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")

    def with_score(self, score):
        return replace(self, score=score)


def iou(a, b):
    """
    Intersection over union of two boxes.

    Two zero-area boxes have no defined union; they score 1.0 when identical
    and 0.0 otherwise.
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    return inter / union


def iou_matrix(boxes_a, boxes_b):
    """
    Pairwise IoU between two (N, 4) and (M, 4) arrays of xyxy boxes.

    Returns:
        (N, M) array with the same degenerate-box rule as ``iou``.
    """
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])

    iw = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    ih = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter

    out = np.zeros_like(union)
    positive = union > 0.0
    out[positive] = inter[positive] / union[positive]
    degenerate = ~positive
    if degenerate.any():
        identical = np.all(boxes_a[:, None, :] == boxes_b[None, :, :], axis=-1)
        out[degenerate & identical] = 1.0
    return out


def center(box):
    return ((box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0)


def center_distance(det, point):
    """Euclidean distance between a detection's box center and a point (gx, gy)."""
    cx, cy = center(det.box)
    return math.hypot(cx - point[0], cy - point[1])


def clamp_box(box, width, height):
    """Clamp every coordinate of a box into [0, width] x [0, height]."""
    return Box(
        min(max(box.x1, 0.0), float(width)),
        min(max(box.y1, 0.0), float(height)),
        min(max(box.x2, 0.0), float(width)),
        min(max(box.y2, 0.0), float(height)),
    )


def translate_box(box, dx, dy):
    """Shift a box by (dx, dy) pixels, keeping its width and height."""
    return Box(box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy)


def detections_to_array(dets):
    """Stack detections into an (N, 6) array of x1, y1, x2, y2, class_id, score."""
    if not dets:
        return np.zeros((0, 6), dtype=np.float64)
    return np.array(
        [[d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.class_id, d.score] for d in dets],
        dtype=np.float64,
    )


def sort_detections(dets):
    """
    Order detections by descending score.

    Ties fall back to smaller y1, then smaller x1, then the original index so
    that the ordering is fully deterministic.
    """
    keyed = sorted(
        enumerate(dets),
        key=lambda item: (-item[1].score, item[1].box.y1, item[1].box.x1, item[0]),
    )
    return [d for _, d in keyed]


def nms(dets, iou_threshold):
    """
    Greedy per-class non-maximum suppression.

    A detection survives iff its IoU with every already kept detection of the
    same class is below ``iou_threshold``.

    Args:
        dets: list of Detection
        iou_threshold: suppression threshold in [0, 1]

    Returns:
        list of kept Detection, sorted by descending score
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    if not dets:
        return []

    ordered = sort_detections(dets)
    arr = detections_to_array(ordered)
    boxes = arr[:, :4]
    classes = arr[:, 4].astype(np.int64)

    kept = []
    for i in range(len(ordered)):
        if kept:
            same = [k for k in kept if classes[k] == classes[i]]
            if same and np.any(iou_matrix(boxes[i], boxes[same])[0] >= iou_threshold):
                continue
        kept.append(i)
    return [ordered[i] for i in kept]
