"""Detection evaluation: matching, precision/recall, VOC AP, AR and confusion matrices."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import OrientedBox, boxes_to_array, iou_one_to_many
from .postproc import Detection, score_filter, score_order

AR_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
REPORTED_THRESHOLDS = (0.5, 0.75, 0.85)
DEFAULT_BUDGETS = (300, 500, 1000)


@dataclass(frozen=True)
class GroundTruth:
    box: OrientedBox
    label: int
    difficult: bool = False


@dataclass
class MatchResult:
    """Outcome of greedy matching, indexed like the input detections."""

    tp: np.ndarray               # bool per detection
    matched_gt: np.ndarray       # gt index per detection, -1 if FP
    order: np.ndarray            # detection indices in score order
    unmatched_gts: list[int]

    @property
    def sorted_flags(self) -> np.ndarray:
        return self.tp[self.order]


def iou_matrix(dets_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """(D, G) rotated IoU matrix."""
    out = np.zeros((dets_boxes.shape[0], gt_boxes.shape[0]))
    if out.size == 0:
        return out
    for g in range(gt_boxes.shape[0]):
        out[:, g] = iou_one_to_many(gt_boxes[g], dets_boxes)
    return out


def _greedy_match(order: np.ndarray, ious: np.ndarray, allowed: np.ndarray, iou_thr: float):
    n_det, n_gt = ious.shape
    claimed = np.zeros(n_gt, dtype=bool)
    matched = np.full(n_det, -1, dtype=np.int64)
    for d in order:
        cand = np.where(allowed[d] & ~claimed, ious[d], -1.0)
        if n_gt == 0:
            continue
        g = int(np.argmax(cand))
        if cand[g] >= iou_thr:
            claimed[g] = True
            matched[d] = g
    return matched, claimed


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order.

    Each detection takes its highest-IoU unclaimed gt of the same class
    (any class when the detection label is ``None``) if that IoU reaches
    ``iou_thr``; everything else is a false positive.
    """
    order = score_order([d.score for d in dets])
    ious = iou_matrix(boxes_to_array(d.box for d in dets), boxes_to_array(g.box for g in gts))
    det_labels = [d.label for d in dets]
    gt_labels = np.array([g.label for g in gts], dtype=np.int64)
    allowed = np.ones(ious.shape, dtype=bool)
    for i, lab in enumerate(det_labels):
        if lab is not None:
            allowed[i] = gt_labels == lab
    matched, claimed = _greedy_match(order, ious, allowed, iou_thr)
    return MatchResult(matched >= 0, matched, order, [int(g) for g in np.flatnonzero(~claimed)])


def pr_curve(flags, num_gt: int):
    """Cumulative precision and recall along a score-sorted TP/FP flag list."""
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return np.zeros(0), np.zeros(0)
    tp = np.cumsum(flags).astype(np.float64)
    fp = np.cumsum(~flags).astype(np.float64)
    precision = tp / (tp + fp)
    recall = tp / num_gt if num_gt > 0 else np.zeros_like(tp)
    return precision, recall


def ap_voc07(precision, recall) -> float:
    """11-point interpolated AP."""
    precision, recall = np.asarray(precision), np.asarray(recall)
    total = 0.0
    for i in range(11):
        mask = recall >= i / 10
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / 11.0


def ap_voc12(precision, recall) -> float:
    """Area under the monotone precision envelope."""
    precision, recall = np.asarray(precision), np.asarray(recall)
    if precision.size == 0:
        return 0.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


AP_FUNCS = {"voc07": ap_voc07, "voc12": ap_voc12}


# ---------------------------------------------------------------------------
# recall
# ---------------------------------------------------------------------------


def _best_iou_prefix(proposals: Sequence[Detection], gts: Sequence, budgets: Sequence[int]) -> dict[int, np.ndarray]:
    order = score_order([p.score for p in proposals])
    boxes = boxes_to_array(proposals[i].box for i in order)
    gboxes = boxes_to_array(_box(g) for g in gts)
    ious = iou_matrix(boxes, gboxes)                 # (P, G) in score order
    out = {}
    for b in budgets:
        top = ious[:b]
        out[b] = top.max(axis=0) if top.shape[0] else np.zeros(len(gts))
    return out


def _box(g) -> OrientedBox:
    return g.box if hasattr(g, "box") else g


def recall_at(proposals: Sequence[Detection], gts: Sequence, iou_thr: float,
              budget: Optional[int] = None) -> float:
    """Fraction of gts hit (IoU >= thr) by some proposal among the top ``budget``.

    Returns 0.0 when there are no ground truths.
    """
    if not gts:
        return 0.0
    b = len(proposals) if budget is None else budget
    best = _best_iou_prefix(proposals, gts, [b])[b]
    return float(np.count_nonzero(best >= iou_thr)) / len(gts)


def _recall_row(hits: dict[float, int], num_gt: int) -> dict:
    rec = {f"{t:.2f}": (hits[t] / num_gt if num_gt else 0.0) for t in AR_THRESHOLDS}
    rec_vals = [hits[t] / num_gt if num_gt else 0.0 for t in AR_THRESHOLDS]
    row = {f"R{int(round(t * 100))}": rec[f"{t:.2f}"] for t in REPORTED_THRESHOLDS}
    row["AR"] = float(np.mean(rec_vals))
    row["recall"] = rec
    return row


def dataset_average_recall(per_image_proposals: Sequence[Sequence[Detection]],
                           per_image_gts: Sequence[Sequence], budgets: Sequence[int] = DEFAULT_BUDGETS) -> dict:
    """Recall table pooled over images: ``{budget: {"R50", "R75", "R85", "AR", "recall"}}``."""
    hits = {b: {t: 0 for t in AR_THRESHOLDS} for b in budgets}
    num_gt = 0
    for props, gts in zip(per_image_proposals, per_image_gts):
        num_gt += len(gts)
        if not gts:
            continue
        best = _best_iou_prefix(props, gts, budgets)
        for b in budgets:
            for t in AR_THRESHOLDS:
                hits[b][t] += int(np.count_nonzero(best[b] >= t))
    return {b: _recall_row(hits[b], num_gt) for b in budgets}


def average_recall(proposals: Sequence[Detection], gts: Sequence, budgets: Sequence[int] = DEFAULT_BUDGETS) -> dict:
    return dataset_average_recall([proposals], [gts], budgets)


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------


def confusion_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int,
                     iou_thr: float = 0.5, score_thr: float = 0.05) -> np.ndarray:
    """(K+1, K+1) counts; rows are gt classes, columns predicted classes, index K is BG.

    Matching is class-agnostic and greedy in score order, so cross-class
    confusions show up off the diagonal.
    """
    kept = score_filter(dets, score_thr)
    cm = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    order = score_order([d.score for d in kept])
    ious = iou_matrix(boxes_to_array(d.box for d in kept), boxes_to_array(g.box for g in gts))
    allowed = np.ones(ious.shape, dtype=bool)
    matched, claimed = _greedy_match(order, ious, allowed, iou_thr)
    for d, g in enumerate(matched):
        if g >= 0:
            cm[gts[g].label, kept[d].label] += 1
        else:
            cm[num_classes, kept[d].label] += 1
    for g in np.flatnonzero(~claimed):
        cm[gts[g].label, num_classes] += 1
    return cm


# ---------------------------------------------------------------------------
# dataset report
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    class_names: Sequence[str]
    metric: str = "voc12"
    iou_thr: float = 0.5
    ar_budgets: Sequence[int] = DEFAULT_BUDGETS
    confusion_iou_thr: float = 0.5
    confusion_score_thr: float = 0.05

    def __post_init__(self):
        if self.metric not in AP_FUNCS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {sorted(AP_FUNCS)}")
        if not 0.0 < self.iou_thr <= 1.0:
            raise ValueError("iou_thr must lie in (0, 1]")


@dataclass
class EvalReport:
    metric: str
    class_names: list[str]
    ap: dict[str, float]
    map: float
    map_by_iou: dict[str, float]
    counts: dict[str, dict[str, int]]
    recall: dict[int, dict]
    confusion: list[list[int]]
    curves: dict[str, dict[str, list[float]]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "class_names": list(self.class_names),
            "ap": self.ap,
            "mAP": self.map,
            "mAP_by_iou": self.map_by_iou,
            "counts": self.counts,
            "recall": {str(b): row for b, row in self.recall.items()},
            "confusion_matrix": self.confusion,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _class_ap(per_image_dets, per_image_gts, cls: int, iou_thr: float, ap_fn):
    scores, flags, img_idx, det_idx = [], [], [], []
    num_gt = 0
    for im, (dets, gts) in enumerate(zip(per_image_dets, per_image_gts)):
        cdets = [d for d in dets if d.label == cls]
        cgts = [g for g in gts if g.label == cls]
        num_gt += len(cgts)
        if not cdets:
            continue
        m = match_detections(cdets, cgts, iou_thr)
        scores.extend(d.score for d in cdets)
        flags.extend(m.tp.tolist())
        img_idx.extend([im] * len(cdets))
        det_idx.extend(range(len(cdets)))
    order = np.lexsort((np.array(det_idx, dtype=np.int64), np.array(img_idx, dtype=np.int64),
                        -np.array(scores, dtype=np.float64)))
    sorted_flags = np.array(flags, dtype=bool)[order] if flags else np.zeros(0, dtype=bool)
    precision, recall = pr_curve(sorted_flags, num_gt)
    tp = int(sorted_flags.sum())
    counts = {"gt": num_gt, "det": int(sorted_flags.size), "tp": tp,
              "fp": int(sorted_flags.size) - tp, "fn": num_gt - tp}
    return ap_fn(precision, recall), counts, precision, recall


def evaluate_dataset(per_image_dets: Sequence[Sequence[Detection]],
                     per_image_gts: Sequence[Sequence[GroundTruth]], config: EvalConfig) -> EvalReport:
    """Pool matching over images per class and summarise.

    Classes without ground truths are left out of every mean. Difficulty
    flags are carried on the ground truths but not used.
    """
    if len(per_image_dets) != len(per_image_gts):
        raise ValueError("detections and ground truths cover different image counts")
    ap_fn = AP_FUNCS[config.metric]
    k = len(config.class_names)
    ap, counts, curves = {}, {}, {}
    for c, name in enumerate(config.class_names):
        val, cnt, prec, rec = _class_ap(per_image_dets, per_image_gts, c, config.iou_thr, ap_fn)
        counts[name] = cnt
        if cnt["gt"] > 0:
            ap[name] = val
            curves[name] = {"precision": prec.tolist(), "recall": rec.tolist()}
    mean_ap = float(np.mean(list(ap.values()))) if ap else 0.0

    by_iou = {}
    for t in AR_THRESHOLDS:
        vals = [_class_ap(per_image_dets, per_image_gts, c, t, ap_fn)[0]
                for c, name in enumerate(config.class_names) if counts[name]["gt"] > 0]
        by_iou[f"{t:.2f}"] = float(np.mean(vals)) if vals else 0.0
    map_by_iou = {"AP50": by_iou["0.50"], "AP75": by_iou["0.75"],
                  "AP50:95": float(np.mean(list(by_iou.values())))}

    recall = dataset_average_recall(per_image_dets, per_image_gts, config.ar_budgets)
    cm = np.zeros((k + 1, k + 1), dtype=np.int64)
    for dets, gts in zip(per_image_dets, per_image_gts):
        cm += confusion_matrix(dets, gts, k, config.confusion_iou_thr, config.confusion_score_thr)
    return EvalReport(config.metric, list(config.class_names), ap, mean_ap, map_by_iou, counts,
                      recall, cm.tolist(), curves)
