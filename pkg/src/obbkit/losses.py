"""Focal loss, joint proposal quality, adaptive recognition loss and GIoU loss.

The probability kernels accept scalars or numpy arrays and return
``(loss, dloss/dp)`` (plus ``dloss/dt`` for :func:`arl`). ``t`` is treated
as a per-sample weight, so no gradient flows from it into ``p``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox, rotated_giou

PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 2.5

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.alpha, self.gamma, self.beta)):
            raise ValueError("loss parameters must be finite")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be non-negative")


FOCAL_DEFAULTS = LossParams(alpha=0.25, gamma=2.0)
ARL_DEFAULTS = LossParams(gamma=1.5, beta=2.5)


def _prob(p):
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("probability outside [0, 1]")
    return np.clip(arr, PROB_EPS, 1.0 - PROB_EPS)


def _labels(y):
    arr = np.asarray(y)
    if np.any((arr != 0) & (arr != 1)):
        raise ValueError("labels must be 0 or 1")
    return arr.astype(bool)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def _negative_branch(p, gamma):
    loss = -(p ** gamma) * np.log1p(-p)
    if gamma == 0:
        grad = 1.0 / (1.0 - p)
    else:
        grad = -gamma * p ** (gamma - 1.0) * np.log1p(-p) + p ** gamma / (1.0 - p)
    return loss, grad


def focal_loss(p, y, params: LossParams = FOCAL_DEFAULTS):
    """Focal loss and its derivative with respect to ``p``.

    Positives: ``-alpha (1-p)^gamma log p``; negatives: ``-p^gamma log(1-p)``.
    """
    p, y = _prob(p), _labels(y)
    a, g = params.alpha, params.gamma
    q = 1.0 - p
    pos_loss = -a * q ** g * np.log(p)
    if g == 0:
        pos_grad = -a / p
    else:
        pos_grad = a * g * q ** (g - 1.0) * np.log(p) - a * q ** g / p
    neg_loss, neg_grad = _negative_branch(p, g)
    loss = np.where(y, pos_loss, neg_loss)
    grad = np.where(y, pos_grad, neg_grad)
    return _out(loss), _out(grad)


def cross_entropy(p, y):
    p, y = _prob(p), _labels(y)
    return _out(np.where(y, -np.log(p), -np.log1p(-p)))


def joint_quality(s, q):
    """Geometric mean of first-stage score ``s`` and refined IoU ``q``."""
    s = np.asarray(s, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, v in (("s", s), ("q", q)):
        if np.any(~np.isfinite(v)) or np.any(v < 0.0) or np.any(v > 1.0):
            raise ValueError(f"{name} outside [0, 1]")
    return _out(np.sqrt(s * q))


def arl(p, y, t, params: LossParams = ARL_DEFAULTS):
    """Adaptive recognition loss with derivatives ``(loss, d/dp, d/dt)``.

    Positives: ``-t exp(beta t) log p``; negatives share the focal
    negative branch. ``alpha`` is not used.
    """
    p, y = _prob(p), _labels(y)
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0):
        raise ValueError("quality t must be non-negative")
    if np.any(t > 1.0):
        raise ValueError("quality t must not exceed 1")
    b = params.beta
    w = t * np.exp(b * t)
    logp = np.log(p)
    pos_loss = -w * logp
    pos_dp = -w / p
    pos_dt = -(1.0 + b * t) * np.exp(b * t) * logp
    neg_loss, neg_dp = _negative_branch(p, params.gamma)
    loss = np.where(y, pos_loss, neg_loss)
    dp = np.where(y, pos_dp, neg_dp)
    dt = np.where(y, pos_dt, 0.0)
    return _out(loss), _out(dp), _out(dt)


def giou_loss(pred: OrientedBox, gt: OrientedBox) -> float:
    return 1.0 - rotated_giou(pred, gt)


def reduce_batch(per_sample, num_pos: int) -> float:
    """Sum of per-sample losses over ``max(num_pos, 1)``."""
    if num_pos < 0:
        raise ValueError("num_pos must be >= 0")
    return math.fsum(float(v) for v in np.ravel(per_sample)) / max(num_pos, 1)
