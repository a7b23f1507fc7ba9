"""Proposal and detection post-processing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import OrientedBox, aabb_np, boxes_to_array, iou_one_to_many

DEFAULT_PROPOSAL_NMS_THR = 0.8


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    score: float
    label: Optional[int] = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score {self.score}")


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score, lower index first on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def _check_thr(iou_thr: float):
    if not 0.0 < iou_thr < 1.0:
        raise ValueError(f"iou threshold must lie in (0, 1), got {iou_thr}")


def _aabb_iou_one_to_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    a = aabb_np(box)[0]
    o = aabb_np(others)
    iw = np.clip(np.minimum(a[2], o[:, 2]) - np.maximum(a[0], o[:, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[3], o[:, 3]) - np.maximum(a[1], o[:, 1]), 0.0, None)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (o[:, 2] - o[:, 0]) * (o[:, 3] - o[:, 1]) - inter
    return inter / union


def _greedy_nms(boxes: np.ndarray, scores: Sequence[float], iou_thr: float,
                iou_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> list[int]:
    order = score_order(scores)
    alive = np.ones(order.size, dtype=bool)
    keep = []
    for pos in range(order.size):
        if not alive[pos]:
            continue
        i = order[pos]
        keep.append(int(i))
        rest = np.flatnonzero(alive[pos + 1:]) + pos + 1
        if rest.size == 0:
            break
        ious = iou_fn(boxes[i], boxes[order[rest]])
        alive[rest[ious > iou_thr]] = False
    return keep


def rotated_nms(dets: Sequence[Detection], iou_thr: float) -> list[int]:
    """Greedy NMS on rotated IoU; returns kept indices in (score desc, index asc) order."""
    _check_thr(iou_thr)
    if not dets:
        return []
    boxes = boxes_to_array(d.box for d in dets)
    return _greedy_nms(boxes, [d.score for d in dets], iou_thr, iou_one_to_many)


def horizontal_nms(dets: Sequence[Detection], iou_thr: float) -> list[int]:
    """Same greedy rule applied to the axis-aligned hulls of the boxes."""
    _check_thr(iou_thr)
    if not dets:
        return []
    boxes = boxes_to_array(d.box for d in dets)
    return _greedy_nms(boxes, [d.score for d in dets], iou_thr, _aabb_iou_one_to_many)


def batched_nms(dets: Sequence[Detection], iou_thr: float, mode: str = "rotated") -> list[int]:
    """Per-class NMS for final detections; result in global score order."""
    nms = {"rotated": rotated_nms, "horizontal": horizontal_nms}[mode]
    keep = []
    for label in sorted({d.label for d in dets}, key=lambda v: (v is None, v)):
        idx = [i for i, d in enumerate(dets) if d.label == label]
        keep.extend(idx[j] for j in nms([dets[i] for i in idx], iou_thr))
    scores = np.array([dets[i].score for i in keep])
    return [keep[j] for j in np.lexsort((np.array(keep), -scores))] if keep else []


def select_proposals(dets: Sequence[Detection], n: int, use_nms: bool,
                     iou_thr: float = DEFAULT_PROPOSAL_NMS_THR) -> list[Detection]:
    """Top-``n`` proposals by score, optionally after class-agnostic rotated NMS."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if use_nms:
        order = rotated_nms(dets, iou_thr)
    else:
        order = score_order([d.score for d in dets]).tolist()
    return [dets[i] for i in order[:n]]


def score_filter(dets: Sequence[Detection], thr: float) -> list[Detection]:
    return [d for d in dets if d.score >= thr]
