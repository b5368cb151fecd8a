"""Detection evaluation: IOU, greedy NMS, TP/FP matching, and AP.

All of this is deterministic: score ties resolve to the lower index
everywhere, and AP uses all-point interpolation (the precision envelope
integrated over recall) with a fixed left-to-right summation order so
repeated runs produce bit-identical values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .types import BoundingBox, Detection, InvariantError, float_value


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when they do not overlap."""
    ix1, iy1 = max(a.x1, b.x1), max(a.y1, b.y1)
    ix2, iy2 = min(a.x2, b.x2), min(a.y2, b.y2)
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Picks the highest-scoring box (ties: lower index), suppresses every box
    overlapping it with IOU strictly greater than the threshold, repeats.
    Returns kept indices in pick order.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4 or boxes.shape[0] != scores.shape[0]:
        raise InvariantError(
            f"nms expects (N, 4) boxes with (N,) scores, got {boxes.shape} / {scores.shape}")
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvariantError(f"iou threshold {iou_threshold} outside [0, 1]")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        ix1 = np.maximum(x1[i], x1[rest])
        iy1 = np.maximum(y1[i], y1[rest])
        ix2 = np.minimum(x2[i], x2[rest])
        iy2 = np.minimum(y2[i], y2[rest])
        iw = np.maximum(0.0, ix2 - ix1)
        ih = np.maximum(0.0, iy2 - iy1)
        inter = iw * ih
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= iou_threshold]
    return keep


def match_detections(detections: Sequence[Detection],
                     truths: Sequence[BoundingBox],
                     iou_threshold: float) -> list[bool]:
    """Greedy TP/FP labels, aligned with the input detection order.

    Detections are processed in descending objectness (ties: input order).
    Each claims its highest-IOU unmatched truth at or above the threshold
    (ties: lower truth index); every truth matches at most once.
    """
    order = sorted(range(len(detections)),
                   key=lambda i: (-float_value(detections[i].objectness), i))
    taken = [False] * len(truths)
    flags = [False] * len(detections)
    for i in order:
        best_j, best_v = None, -1.0
        for j, t in enumerate(truths):
            if taken[j]:
                continue
            v = iou(detections[i].box, t)
            if v >= iou_threshold and v > best_v:
                best_j, best_v = j, v
        if best_j is not None:
            taken[best_j] = True
            flags[i] = True
    return flags


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    confidence: float


@dataclass(frozen=True)
class PRCurve:
    """Cutoff-by-cutoff precision/recall, recall nondecreasing."""

    points: tuple[PRPoint, ...] = ()

    def __post_init__(self):
        prev = 0.0
        for p in self.points:
            if not (0.0 <= p.recall <= 1.0 and 0.0 <= p.precision <= 1.0):
                raise InvariantError(f"PR point {p} outside the unit square")
            if p.recall < prev:
                raise InvariantError("recall must be nondecreasing along the curve")
            prev = p.recall


@dataclass(frozen=True)
class APResult:
    """AP plus its curve; ap is None when no truths exist (undefined, not 0)."""

    ap: float | None
    curve: PRCurve
    n_truths: int
    n_detections: int

    @property
    def defined(self) -> bool:
        return self.ap is not None


def average_precision(labeled: Sequence[tuple[float, bool]], n_truths: int) -> APResult:
    """All-point-interpolation AP from (confidence, is_tp) pairs.

    Pairs are ranked by descending confidence (ties keep input order). The
    precision envelope max(precision at recall >= r) is integrated over the
    recall steps, left to right. No truths means AP is undefined and
    reported as None; no detections with truths present means AP 0.
    """
    if n_truths < 0:
        raise InvariantError(f"n_truths {n_truths} is negative")
    order = sorted(range(len(labeled)), key=lambda i: (-labeled[i][0], i))
    flags = [bool(labeled[i][1]) for i in order]
    confs = [float(labeled[i][0]) for i in order]
    if n_truths == 0:
        return APResult(ap=None, curve=PRCurve(), n_truths=0, n_detections=len(labeled))
    points = []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += 1 if flag else 0
        points.append(PRPoint(recall=tp / n_truths, precision=tp / k, confidence=confs[k - 1]))
    envelope = [0.0] * len(points)
    best = 0.0
    for i in range(len(points) - 1, -1, -1):
        best = max(best, points[i].precision)
        envelope[i] = best
    ap = 0.0
    prev_recall = 0.0
    for i, p in enumerate(points):
        if p.recall > prev_recall:
            ap += (p.recall - prev_recall) * envelope[i]
            prev_recall = p.recall
    return APResult(ap=ap, curve=PRCurve(points=tuple(points)),
                    n_truths=n_truths, n_detections=len(labeled))


def evaluate_detections(per_image: Sequence[tuple[Sequence[Detection], Sequence[BoundingBox]]],
                        iou_threshold: float) -> APResult:
    """Dataset-level AP: match per image, pool (confidence, tp), rank, integrate.

    The caller filters detections and truths to one class first; pooling
    order is the image order, so ranking ties are deterministic.
    """
    labeled = []
    n_truths = 0
    for dets, truths in per_image:
        flags = match_detections(dets, truths, iou_threshold)
        for d, f in zip(dets, flags):
            labeled.append((float_value(d.objectness), f))
        n_truths += len(truths)
    return average_precision(labeled, n_truths)
