"""Anchor-point grids, (l, t, r, b, theta) box coding and ATSS assignment."""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import (
    OrientedBox,
    batch_rotated_iou,
    boxes_to_array,
    canonicalize,
    point_in_box,
    rotated_iou,
)

LEVEL_STRIDES = {3: 8, 4: 16, 5: 32, 6: 64, 7: 128}
DEFAULT_LEVELS = (3, 4, 5, 6, 7)
PAD_MULTIPLE = 128

# slack on the mean+std threshold and on max-IoU ties, so that last-ulp
# differences between IoU kernels cannot flip a label
THRESH_EPS = 1e-9
TIE_EPS = 1e-12

NEGATIVE = -1


@dataclass(frozen=True)
class PointGrid:
    level_index: int
    stride: int
    width: int
    height: int

    @property
    def points(self) -> np.ndarray:
        """(height * width, 2) row-major anchor centres."""
        xs = (np.arange(self.width) + 0.5) * self.stride
        ys = (np.arange(self.height) + 0.5) * self.stride
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def __len__(self):
        return self.width * self.height


@dataclass(frozen=True)
class BoxTarget:
    l: float
    t: float
    r: float
    b: float
    theta: float

    @property
    def inside(self) -> bool:
        """False when the encoding point lay outside the box (some offset negative)."""
        return min(self.l, self.t, self.r, self.b) >= 0.0

    def as_tuple(self):
        return (self.l, self.t, self.r, self.b, self.theta)


@dataclass
class AssignmentResult:
    """Per-anchor labels over the concatenated grids.

    ``labels[i]`` is the assigned gt index or ``NEGATIVE``; ``ious[i]`` is
    the rotated IoU between the anchor's stride square and that gt (0 for
    negatives).
    """

    labels: np.ndarray
    ious: np.ndarray
    level_sizes: list[int] = field(default_factory=list)

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.labels >= 0))

    def positives_per_gt(self, num_gts: int) -> list[int]:
        return [int(np.count_nonzero(self.labels == g)) for g in range(num_gts)]


def padded_size(n: int, multiple: int = PAD_MULTIPLE) -> int:
    return int(math.ceil(n / multiple) * multiple)


def generate_anchor_points(image_w: int, image_h: int,
                           levels: Iterable[int] = DEFAULT_LEVELS) -> list[PointGrid]:
    """One grid per level; image dims are padded up to a multiple of 128 first."""
    levels = sorted(set(levels))
    if not levels:
        raise ValueError("level set is empty")
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    pw, ph = padded_size(image_w), padded_size(image_h)
    grids = []
    for lvl in levels:
        if lvl not in LEVEL_STRIDES:
            raise ValueError(f"unsupported pyramid level P{lvl}")
        s = LEVEL_STRIDES[lvl]
        grids.append(PointGrid(lvl, s, math.ceil(pw / s), math.ceil(ph / s)))
    return grids


def decode_box(point: Sequence[float], target: BoxTarget) -> OrientedBox:
    l, t, r, b, theta = target.as_tuple()
    if l + r <= 0 or t + b <= 0:
        raise ValueError(f"non-positive box extent from offsets {target.as_tuple()}")
    c, s = math.cos(theta), math.sin(theta)
    du, dv = (r - l) / 2.0, (b - t) / 2.0
    cx = point[0] + c * du - s * dv
    cy = point[1] + s * du + c * dv
    return canonicalize(OrientedBox(cx, cy, l + r, t + b, theta))


def encode_box(point: Sequence[float], box: OrientedBox) -> BoxTarget:
    """Offsets from ``point`` to the four edges of the canonical box.

    A point outside the box yields at least one negative offset; check
    :attr:`BoxTarget.inside`.
    """
    box = canonicalize(box)
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = point[0] - box.cx, point[1] - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    hw, hh = box.w / 2.0, box.h / 2.0
    return BoxTarget(hw + u, hh + v, hw - u, hh - v, box.theta)


def _anchor_boxes(points: np.ndarray, stride: int) -> np.ndarray:
    n = points.shape[0]
    return np.column_stack([points, np.full(n, float(stride)), np.full(n, float(stride)), np.zeros(n)])


def atss_assign(grids: Sequence[PointGrid], gts: Sequence[OrientedBox], k: int = 9) -> AssignmentResult:
    """ATSS over oriented ground truths.

    Per gt: the ``k`` nearest anchor points of every level (ties broken by
    anchor index) form the candidates; positives are candidates whose
    stride-square IoU reaches mean + population std of the candidate IoUs
    and whose point lies inside the gt. Anchors claimed by several gts go
    to the highest-IoU one, lowest gt index on ties.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    sizes = [len(g) for g in grids]
    total = sum(sizes)
    labels = np.full(total, NEGATIVE, dtype=np.int64)
    ious = np.zeros(total)
    if not gts:
        return AssignmentResult(labels, ious, sizes)

    level_points = [g.points for g in grids]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    gt_arr = boxes_to_array(gts)
    claim_iou = np.full((len(gts), total), -1.0)

    for gi, gt in enumerate(gts):
        cand_idx, cand_boxes = [], []
        for grid, pts, off in zip(grids, level_points, offsets):
            d2 = (pts[:, 0] - gt.cx) ** 2 + (pts[:, 1] - gt.cy) ** 2
            kk = min(k, pts.shape[0])
            order = np.lexsort((np.arange(pts.shape[0]), d2))[:kk]
            cand_idx.append(order + off)
            cand_boxes.append(_anchor_boxes(pts[order], grid.stride))
        idx = np.concatenate(cand_idx)
        cb = np.concatenate(cand_boxes)
        cand_iou = batch_rotated_iou(cb, gt_arr[gi][None, :])
        thr = cand_iou.mean() + cand_iou.std()
        keep = cand_iou >= thr - THRESH_EPS
        for j in np.flatnonzero(keep):
            if point_in_box(cb[j, :2], gt):
                claim_iou[gi, idx[j]] = cand_iou[j]

    claimed = np.flatnonzero((claim_iou >= 0).any(axis=0))
    for a in claimed:
        col = claim_iou[:, a]
        best = col.max()
        g = int(np.flatnonzero(col >= best - TIE_EPS)[0])
        labels[a] = g
        ious[a] = col[g]
    return AssignmentResult(labels, ious, sizes)


def assignment_oracle(grids: Sequence[PointGrid], gts: Sequence[OrientedBox], k: int = 9) -> AssignmentResult:
    """Naive re-derivation of :func:`atss_assign` with plain loops over every anchor."""
    anchors = []
    for grid in grids:
        for yi in range(grid.height):
            for xi in range(grid.width):
                x = (xi + 0.5) * grid.stride
                y = (yi + 0.5) * grid.stride
                anchors.append((grid.level_index, grid.stride, x, y))
    labels = [NEGATIVE] * len(anchors)
    ious = [0.0] * len(anchors)
    best = {}
    for gi, gt in enumerate(gts):
        cands = []
        for grid in grids:
            ranked = []
            for ai, (lvl, stride, x, y) in enumerate(anchors):
                if lvl != grid.level_index:
                    continue
                ranked.append(((x - gt.cx) ** 2 + (y - gt.cy) ** 2, ai))
            ranked.sort()
            cands.extend(ai for _, ai in ranked[:k])
        cand_iou = {}
        for ai in cands:
            _, stride, x, y = anchors[ai]
            cand_iou[ai] = rotated_iou(OrientedBox(x, y, stride, stride, 0.0), gt)
        vals = list(cand_iou.values())
        thr = statistics.fmean(vals) + statistics.pstdev(vals)
        for ai in cands:
            _, _, x, y = anchors[ai]
            if cand_iou[ai] >= thr - THRESH_EPS and point_in_box((x, y), gt):
                prev = best.get(ai)
                if prev is None or cand_iou[ai] > prev[0] + TIE_EPS:
                    best[ai] = (cand_iou[ai], gi)
    for ai, (v, gi) in best.items():
        labels[ai] = gi
        ious[ai] = v
    return AssignmentResult(np.array(labels, dtype=np.int64), np.array(ious), [len(g) for g in grids])
