"""Synthetic scenes with known localisation quality, and the proposal-NMS ablation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import DEFAULT_BUDGETS, GroundTruth, dataset_average_recall
from .geometry import OrientedBox, aabb_np, batch_rotated_iou, boxes_to_array, canonicalize, rotated_iou
from .postproc import DEFAULT_PROPOSAL_NMS_THR, Detection, select_proposals

SCORE_MODELS = ("correlated", "anti-correlated")
MAX_PLACEMENT_TRIES = 200
GT_OVERLAP_LIMIT = 0.05


@dataclass
class SceneConfig:
    image_size: int = 1024
    num_images: int = 8
    coarse_classes: list[str] = field(default_factory=lambda: ["airplane", "ship", "vehicle"])
    fine_per_coarse: int = 4
    objects_per_image: tuple[int, int] = (6, 12)
    size_range: tuple[float, float] = (32.0, 128.0)
    aspect_range: tuple[float, float] = (1.0, 4.0)
    angle_range: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    loc_noise: float = 0.0
    angle_noise: float = 0.0
    confusion_rate: float = 0.0
    fp_rate: float = 0.0
    score_model: str = "correlated"
    proposals_per_object: int = 20
    proposal_base_shift: float = 0.3
    proposal_max_shift: float = 0.6
    background_proposals: int = 1500
    seed: int = 0

    def __post_init__(self):
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.size_range = tuple(float(v) for v in self.size_range)
        self.aspect_range = tuple(float(v) for v in self.aspect_range)
        self.angle_range = tuple(float(v) for v in self.angle_range)
        self.validate()

    def validate(self):
        for name in ("confusion_rate", "fp_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.score_model not in SCORE_MODELS:
            raise ValueError(f"score_model must be one of {SCORE_MODELS}")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image must be a non-decreasing pair")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ValueError("size_range must be positive and non-decreasing")
        if not 1.0 <= self.aspect_range[0] <= self.aspect_range[1]:
            raise ValueError("aspect_range must be >= 1 and non-decreasing")
        if self.angle_range[0] > self.angle_range[1]:
            raise ValueError("angle_range must be non-decreasing")
        if self.size_range[1] * 2 >= self.image_size:
            raise ValueError("objects do not fit in the image")
        if self.loc_noise < 0 or self.angle_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.num_images < 1 or self.fine_per_coarse < 1 or not self.coarse_classes:
            raise ValueError("need at least one image and one class")
        if self.proposals_per_object < 0 or self.background_proposals < 0:
            raise ValueError("proposal counts must be non-negative")
        if self.proposal_base_shift < 0 or self.proposal_max_shift < 0:
            raise ValueError("proposal shifts must be non-negative")

    @property
    def class_names(self) -> list[str]:
        return [f"{c}-{i + 1}" for c in self.coarse_classes for i in range(self.fine_per_coarse)]

    def coarse_of(self, label: int) -> int:
        return label // self.fine_per_coarse

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SceneConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SceneConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("objects_per_image", "size_range", "aspect_range", "angle_range"):
            d[k] = list(d[k])
        return d


@dataclass
class SceneImage:
    gts: list[GroundTruth]
    detections: list[Detection]
    det_quality: list[float]       # IoU with the source gt (0 for spurious detections)
    det_source: list[int]          # source gt index, -1 for spurious detections
    proposals: list[Detection]
    proposal_quality: list[float]  # best IoU with any gt


@dataclass
class SceneSet:
    config: SceneConfig
    images: list[SceneImage]

    @property
    def class_names(self) -> list[str]:
        return self.config.class_names


def _random_box(rng: np.random.Generator, cfg: SceneConfig) -> OrientedBox:
    long_side = rng.uniform(*cfg.size_range)
    aspect = rng.uniform(*cfg.aspect_range)
    theta = rng.uniform(*cfg.angle_range)
    margin = long_side
    cx = rng.uniform(margin, cfg.image_size - margin)
    cy = rng.uniform(margin, cfg.image_size - margin)
    return canonicalize(OrientedBox(cx, cy, long_side, long_side / aspect, theta))


def _place(rng, cfg, existing: list[OrientedBox]) -> OrientedBox | None:
    for _ in range(MAX_PLACEMENT_TRIES):
        cand = _random_box(rng, cfg)
        if all(rotated_iou(cand, e) < GT_OVERLAP_LIMIT for e in existing):
            return cand
    return None


def _score(rng, model: str, q: float, anti_base: float) -> float:
    noise = rng.normal(0.0, 0.05)
    if model == "correlated":
        s = q + noise
    else:
        s = anti_base + 0.6 * (1.0 - q) + 0.4 * noise
    return float(min(max(s, 0.0), 1.0))


def _perturb(rng, cfg, gt: OrientedBox) -> OrientedBox:
    d = rng.normal(0.0, 1.0, 5)
    w = max(gt.w + cfg.loc_noise * d[2], 1.0)
    h = max(gt.h + cfg.loc_noise * d[3], 1.0)
    return OrientedBox(gt.cx + cfg.loc_noise * d[0], gt.cy + cfg.loc_noise * d[1], w, h,
                       gt.theta + cfg.angle_noise * d[4])


def _proposal_cluster(rng, cfg, gt: OrientedBox) -> list[OrientedBox]:
    # one systematic error direction per object; proposals sit at stratified
    # distances along it, so their qualities form an ordered chain
    m = cfg.proposals_per_object
    base = rng.uniform(0.0, cfg.proposal_base_shift)
    phi = rng.uniform(-math.pi, math.pi)
    sw, sh = rng.uniform(-0.3, 0.3, 2)
    dtheta = rng.uniform(-0.2, 0.2)
    strata = (np.arange(m) + rng.uniform(0.0, 1.0, m)) / max(m, 1)
    jitter = rng.normal(0.0, 0.01, (m, 2))
    c, s = math.cos(gt.theta), math.sin(gt.theta)
    out = []
    for j in range(m):
        e = base + (cfg.proposal_max_shift * strata[j] if m > 1 else 0.0)
        du = 0.5 * e * gt.w * math.cos(phi) + jitter[j, 0] * gt.w
        dv = 0.5 * e * gt.h * math.sin(phi) + jitter[j, 1] * gt.h
        out.append(OrientedBox(gt.cx + c * du - s * dv, gt.cy + s * du + c * dv,
                               gt.w * (1.0 + e * sw), gt.h * (1.0 + e * sh), gt.theta + e * dtheta))
    return out


def _gen_image(rng: np.random.Generator, cfg: SceneConfig) -> SceneImage:
    k = len(cfg.class_names)
    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    boxes: list[OrientedBox] = []
    for _ in range(n_obj):
        b = _place(rng, cfg, boxes)
        if b is None:
            raise ValueError(f"could not place {n_obj} non-overlapping objects after "
                             f"{MAX_PLACEMENT_TRIES} tries each; lower objects_per_image or size_range")
        boxes.append(b)
    labels = [int(v) for v in rng.integers(0, k, n_obj)]
    gts = [GroundTruth(b, lab) for b, lab in zip(boxes, labels)]

    dets, quality, source = [], [], []
    for gi, g in enumerate(gts):
        pred = canonicalize(_perturb(rng, cfg, g.box))
        label = g.label
        confuse = rng.random() < cfg.confusion_rate
        alt = int(rng.integers(0, max(cfg.fine_per_coarse - 1, 1)))
        if confuse and cfg.fine_per_coarse > 1:
            base = cfg.coarse_of(label) * cfg.fine_per_coarse
            others = [base + i for i in range(cfg.fine_per_coarse) if base + i != label]
            label = others[alt]
        q = rotated_iou(pred, g.box)
        dets.append(Detection(pred, _score(rng, cfg.score_model, q, 0.3), label))
        quality.append(q)
        source.append(gi)
    for _ in range(n_obj):
        spawn = rng.random() < cfg.fp_rate
        cand = _place(rng, cfg, boxes)
        label = int(rng.integers(0, k))
        score = float(rng.uniform(0.0, 0.5))
        if spawn and cand is not None:
            dets.append(Detection(cand, score, label))
            quality.append(0.0)
            source.append(-1)

    proposals = []
    for g in gts:
        proposals.extend(_proposal_cluster(rng, cfg, g.box))
    n_bg = cfg.background_proposals
    bg = []
    if n_bg:
        ls = rng.uniform(*cfg.size_range, n_bg)
        asp = rng.uniform(*cfg.aspect_range, n_bg)
        th = rng.uniform(-math.pi / 2, math.pi / 2, n_bg)
        xy = rng.uniform(0.0, cfg.image_size, (n_bg, 2))
        bg = [OrientedBox(float(x), float(y), float(l), float(l / a), float(t))
              for (x, y), l, a, t in zip(xy, ls, asp, th)]
    gt_arr = boxes_to_array(boxes)
    prop_scores, prop_q = [], []
    all_props = proposals + bg
    parr = boxes_to_array(all_props)
    best = np.zeros(len(all_props))
    for gi in range(len(boxes)):
        best = np.maximum(best, _iou_vs(parr, gt_arr[gi]))
    for i in range(len(all_props)):
        if i < len(proposals):
            prop_scores.append(_score(rng, cfg.score_model, float(best[i]), 0.35))
        else:
            prop_scores.append(float(rng.uniform(0.0, 0.3)))
        prop_q.append(float(best[i]))
    props = [Detection(canonicalize(b), s) for b, s in zip(all_props, prop_scores)]
    return SceneImage(gts, dets, quality, source, props, prop_q)


def _iou_vs(boxes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    out = np.zeros(boxes.shape[0])
    if boxes.shape[0] == 0:
        return out
    ga = aabb_np(gt)[0]
    ba = aabb_np(boxes)
    hit = ~((ba[:, 2] < ga[0]) | (ga[2] < ba[:, 0]) | (ba[:, 3] < ga[1]) | (ga[3] < ba[:, 1]))
    if hit.any():
        out[hit] = batch_rotated_iou(boxes[hit], gt[None, :])
    return out


def gen_scene_set(config: SceneConfig) -> SceneSet:
    """Deterministic for a fixed ``config.seed``; one spawned stream per image."""
    config.validate()
    seqs = np.random.SeedSequence(config.seed).spawn(config.num_images)
    images = [_gen_image(np.random.default_rng(s), config) for s in seqs]
    return SceneSet(config, images)


def ablation_config(**overrides) -> SceneConfig:
    """Default scene set for the proposal-NMS ablation (score/localisation misaligned)."""
    base = dict(score_model="anti-correlated", num_images=6, seed=0)
    base.update(overrides)
    return SceneConfig(**base)


def nms_ablation(config: SceneConfig, budgets: Sequence[int] = DEFAULT_BUDGETS,
                 iou_thr: float = DEFAULT_PROPOSAL_NMS_THR) -> dict:
    """Recall table for proposal selection with and without rotated NMS.

    Returns ``{"with_nms": {budget: row}, "without_nms": {budget: row}}``
    where each row holds R50, R75, R85, AR and the per-threshold recalls.
    """
    scenes = gen_scene_set(config)
    n = max(budgets)
    gts = [[g.box for g in im.gts] for im in scenes.images]
    table = {}
    for key, use_nms in (("with_nms", True), ("without_nms", False)):
        selected = [select_proposals(im.proposals, n, use_nms, iou_thr) for im in scenes.images]
        table[key] = dataset_average_recall(selected, gts, budgets)
    return table
