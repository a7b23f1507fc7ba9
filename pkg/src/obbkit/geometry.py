"""Oriented-rectangle geometry.

Boxes are ``(cx, cy, w, h, theta)`` with ``theta`` the counter-clockwise
angle from the +x axis to the ``w`` edge. The canonical form has ``w >= h``
and ``theta`` in ``[-pi/2, pi/2)``.

Two IoU routes are provided: a scalar Sutherland-Hodgman kernel
(:func:`rotated_iou`) and a vectorised vertex-gathering kernel
(:func:`batch_rotated_iou`) used by the hot paths in NMS and assignment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

AREA_EPS = 1e-9
CROSS_EPS = 1e-12
INSIDE_EPS = 1e-9

Point = tuple[float, float]


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box field in {vals}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidBoxError(f"box sides must be positive, got w={self.w} h={self.h}")

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "OrientedBox":
        if len(a) != 5:
            raise InvalidBoxError(f"expected 5 box parameters, got {len(a)}")
        return cls(*(float(v) for v in a))

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.theta)

    @property
    def area(self) -> float:
        return self.w * self.h


def _wrap_half_pi(theta: float) -> float:
    # leave in-range angles untouched so canonicalize is bit-idempotent
    if -math.pi / 2 <= theta < math.pi / 2:
        return theta
    k = math.floor((theta + math.pi / 2) / math.pi)
    theta = theta - k * math.pi
    if theta >= math.pi / 2:
        theta -= math.pi
    elif theta < -math.pi / 2:
        theta += math.pi
    return theta


def canonicalize(b: OrientedBox) -> OrientedBox:
    """Return the representative of ``b`` with ``w >= h`` and theta in [-pi/2, pi/2)."""
    w, h, theta = b.w, b.h, b.theta
    if w < h:
        w, h = h, w
        theta = theta + math.pi / 2
    return OrientedBox(b.cx, b.cy, w, h, _wrap_half_pi(theta))


def corners(b: OrientedBox) -> list[Point]:
    """Counter-clockwise corners, starting at the (+w/2, +h/2) local corner."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    hw, hh = b.w / 2.0, b.h / 2.0
    out = []
    for u, v in ((hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh)):
        out.append((b.cx + c * u - s * v, b.cy + s * u + c * v))
    return out


def aabb_of(b: OrientedBox) -> tuple[float, float, float, float]:
    """Tight axis-aligned bounds ``(xmin, ymin, xmax, ymax)``."""
    c, s = abs(math.cos(b.theta)), abs(math.sin(b.theta))
    ex = (b.w * c + b.h * s) / 2.0
    ey = (b.w * s + b.h * c) / 2.0
    return (b.cx - ex, b.cy - ey, b.cx + ex, b.cy + ey)


def point_in_box(p: Sequence[float], b: OrientedBox) -> bool:
    """Inclusive containment test (boundary points count as inside)."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    dx, dy = p[0] - b.cx, p[1] - b.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return abs(u) <= b.w / 2.0 + INSIDE_EPS and abs(v) <= b.h / 2.0 + INSIDE_EPS


# ---------------------------------------------------------------------------
# convex polygons
# ---------------------------------------------------------------------------


def _cross(o: Point, a: Point, b: Point) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def polygon_area(vertices: Sequence[Point]) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    n = len(vertices)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return acc / 2.0


def _clean(vertices: Sequence[Point]) -> tuple[Point, ...]:
    pts = list(vertices)
    if len(pts) >= 3 and polygon_area(pts) < 0:
        pts.reverse()
    changed = True
    while changed and len(pts) >= 3:
        changed = False
        n = len(pts)
        for i in range(n):
            prev, cur, nxt = pts[i - 1], pts[i], pts[(i + 1) % n]
            scale = max(
                abs(cur[0] - prev[0]) + abs(cur[1] - prev[1]),
                abs(nxt[0] - cur[0]) + abs(nxt[1] - cur[1]),
                1.0,
            )
            if abs(_cross(prev, cur, nxt)) <= CROSS_EPS * scale * scale:
                del pts[i]
                changed = True
                break
    if len(pts) < 3 or polygon_area(pts) < AREA_EPS:
        return ()
    return tuple(pts)


@dataclass(frozen=True)
class ConvexPolygon:
    vertices: tuple[Point, ...] = ()

    @classmethod
    def from_points(cls, vertices: Iterable[Sequence[float]]) -> "ConvexPolygon":
        """Build from an ordered vertex ring, dropping duplicates and collinear points."""
        return cls(_clean([(float(x), float(y)) for x, y in vertices]))

    @classmethod
    def of_box(cls, b: OrientedBox) -> "ConvexPolygon":
        return cls(tuple(corners(b)))

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    def __len__(self):
        return len(self.vertices)


def _line_intersection(s: Point, e: Point, c1: Point, c2: Point) -> Point:
    dcx, dcy = c1[0] - c2[0], c1[1] - c2[1]
    dpx, dpy = s[0] - e[0], s[1] - e[1]
    n1 = c1[0] * c2[1] - c1[1] * c2[0]
    n2 = s[0] * e[1] - s[1] * e[0]
    denom = dcx * dpy - dcy * dpx
    if denom == 0.0:
        return e
    return ((n1 * dpx - n2 * dcx) / denom, (n1 * dpy - n2 * dcy) / denom)


def convex_polygon_intersection(a: ConvexPolygon, b: ConvexPolygon) -> ConvexPolygon:
    """Clip ``a`` by every edge of ``b`` (Sutherland-Hodgman)."""
    if a.is_empty or b.is_empty:
        return ConvexPolygon()
    output = list(a.vertices)
    clip = b.vertices
    c1 = clip[-1]
    for c2 in clip:
        if not output:
            break
        ex, ey = c2[0] - c1[0], c2[1] - c1[1]
        scale = max(abs(ex) + abs(ey), 1.0)

        def inside(p, c1=c1, ex=ex, ey=ey, scale=scale):
            return ex * (p[1] - c1[1]) - ey * (p[0] - c1[0]) >= -CROSS_EPS * scale

        inp, output = output, []
        s = inp[-1]
        s_in = inside(s)
        for e in inp:
            e_in = inside(e)
            if e_in:
                if not s_in:
                    output.append(_line_intersection(s, e, c1, c2))
                output.append(e)
            elif s_in:
                output.append(_line_intersection(s, e, c1, c2))
            s, s_in = e, e_in
        c1 = c2
    if output == list(a.vertices):
        return a
    return ConvexPolygon.from_points(output)


def convex_hull(points: Iterable[Sequence[float]]) -> ConvexPolygon:
    """Monotone-chain hull; collinear boundary points are dropped."""
    pts = sorted({(float(p[0]), float(p[1])) for p in points})
    if not pts:
        raise ValueError("convex_hull needs at least one point")
    if len(pts) < 3:
        return ConvexPolygon()
    lower: list[Point] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[Point] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return ConvexPolygon.from_points(lower[:-1] + upper[:-1])


# ---------------------------------------------------------------------------
# IoU / GIoU
# ---------------------------------------------------------------------------


def _aabbs_disjoint(a: OrientedBox, b: OrientedBox) -> bool:
    ax0, ay0, ax1, ay1 = aabb_of(a)
    bx0, by0, bx1, by1 = aabb_of(b)
    return ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0


def _overlap(a: OrientedBox, b: OrientedBox):
    pa, pb = ConvexPolygon.of_box(a), ConvexPolygon.of_box(b)
    area_a, area_b = pa.area, pb.area
    if _aabbs_disjoint(a, b):
        return pa, pb, 0.0, area_a + area_b
    inter = convex_polygon_intersection(pa, pb).area
    if inter < AREA_EPS:
        inter = 0.0
    return pa, pb, inter, area_a + area_b - inter


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    _, _, inter, union = _overlap(a, b)
    if inter == 0.0:
        return 0.0
    return min(inter / union, 1.0)


def rotated_giou(a: OrientedBox, b: OrientedBox) -> float:
    """IoU minus the uncovered fraction of the convex hull of both boxes."""
    pa, pb, inter, union = _overlap(a, b)
    iou = min(inter / union, 1.0) if inter > 0.0 else 0.0
    hull = convex_hull(pa.vertices + pb.vertices).area
    uncovered = hull - union
    if uncovered < AREA_EPS:
        return iou
    return iou - uncovered / hull


def mc_iou_oracle(a: OrientedBox, b: OrientedBox, n: int = 4_000_000, seed: int = 0,
                  chunk: int = 1_000_000) -> float:
    """Monte-Carlo IoU estimate from uniform samples over the joint AABB."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ax0, ay0, ax1, ay1 = aabb_of(a)
    bx0, by0, bx1, by1 = aabb_of(b)
    x0, y0, x1, y1 = min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate joint bounding box")
    rng = np.random.default_rng(seed)
    n_inter = n_union = 0
    remaining = n
    while remaining > 0:
        m = min(chunk, remaining)
        xs = x0 + (x1 - x0) * rng.random(m)
        ys = y0 + (y1 - y0) * rng.random(m)
        in_a = _points_in_box_np(xs, ys, a)
        in_b = _points_in_box_np(xs, ys, b)
        n_inter += int(np.count_nonzero(in_a & in_b))
        n_union += int(np.count_nonzero(in_a | in_b))
        remaining -= m
    if n_union == 0:
        return 0.0
    return n_inter / n_union


def _points_in_box_np(xs: np.ndarray, ys: np.ndarray, b: OrientedBox) -> np.ndarray:
    c, s = math.cos(b.theta), math.sin(b.theta)
    dx, dy = xs - b.cx, ys - b.cy
    u = c * dx + s * dy
    v = c * dy - s * dx
    return (np.abs(u) <= b.w / 2.0) & (np.abs(v) <= b.h / 2.0)


# ---------------------------------------------------------------------------
# vectorised kernel
# ---------------------------------------------------------------------------


def boxes_to_array(boxes: Iterable[OrientedBox]) -> np.ndarray:
    arr = np.array([bx.as_tuple() for bx in boxes], dtype=np.float64)
    return arr.reshape(-1, 5)


def corners_np(boxes: np.ndarray) -> np.ndarray:
    """(N, 5) boxes -> (N, 4, 2) counter-clockwise corners."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    c, s = np.cos(boxes[:, 4]), np.sin(boxes[:, 4])
    hw, hh = boxes[:, 2] / 2.0, boxes[:, 3] / 2.0
    u = np.stack([hw, -hw, -hw, hw], axis=1)
    v = np.stack([hh, hh, -hh, -hh], axis=1)
    x = boxes[:, 0:1] + c[:, None] * u - s[:, None] * v
    y = boxes[:, 1:2] + s[:, None] * u + c[:, None] * v
    return np.stack([x, y], axis=2)


def aabb_np(boxes: np.ndarray) -> np.ndarray:
    """(N, 5) boxes -> (N, 4) ``xmin, ymin, xmax, ymax``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    c, s = np.abs(np.cos(boxes[:, 4])), np.abs(np.sin(boxes[:, 4]))
    ex = (boxes[:, 2] * c + boxes[:, 3] * s) / 2.0
    ey = (boxes[:, 2] * s + boxes[:, 3] * c) / 2.0
    return np.stack([boxes[:, 0] - ex, boxes[:, 1] - ey, boxes[:, 0] + ex, boxes[:, 1] + ey], axis=1)


def _inside_np(pts: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    # pts (N, K, 2), boxes (N, 5) -> (N, K)
    c, s = np.cos(boxes[:, 4])[:, None], np.sin(boxes[:, 4])[:, None]
    dx = pts[..., 0] - boxes[:, 0:1]
    dy = pts[..., 1] - boxes[:, 1:2]
    u = c * dx + s * dy
    v = c * dy - s * dx
    return (np.abs(u) <= boxes[:, 2:3] / 2.0 + INSIDE_EPS) & (np.abs(v) <= boxes[:, 3:4] / 2.0 + INSIDE_EPS)


def batch_intersection_area(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise intersection area of paired (N, 5) box arrays.

    Gathers corners of each box inside the other plus all edge crossings,
    orders them by angle about their mean and applies the shoelace formula.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    n = a.shape[0]
    if n == 0:
        return np.zeros(0)
    ca, cb = corners_np(a), corners_np(b)
    a_in_b = _inside_np(ca, b)
    b_in_a = _inside_np(cb, a)

    p = ca[:, :, None, :]                      # (N, 4, 1, 2)
    r = (np.roll(ca, -1, axis=1) - ca)[:, :, None, :]
    q = cb[:, None, :, :]                      # (N, 1, 4, 2)
    sv = (np.roll(cb, -1, axis=1) - cb)[:, None, :, :]
    denom = r[..., 0] * sv[..., 1] - r[..., 1] * sv[..., 0]
    qp = q - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * sv[..., 1] - qp[..., 1] * sv[..., 0]) / denom
        uu = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / denom
    ok = (denom != 0) & (t >= 0) & (t <= 1) & (uu >= 0) & (uu <= 1)
    t = np.where(ok, t, 0.0)
    cross_pts = (p + t[..., None] * r).reshape(n, 16, 2)

    pts = np.concatenate([ca, cb, cross_pts], axis=1)          # (N, 24, 2)
    valid = np.concatenate([a_in_b, b_in_a, ok.reshape(n, 16)], axis=1)
    pts = np.where(valid[..., None], pts, 0.0)
    count = valid.sum(axis=1)
    center = pts.sum(axis=1) / np.maximum(count, 1)[:, None]
    ang = np.arctan2(pts[..., 1] - center[:, 1:2], pts[..., 0] - center[:, 0:1])
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    sp = np.take_along_axis(pts, order[..., None], axis=1)
    sv_valid = np.take_along_axis(valid, order, axis=1)
    sp = np.where(sv_valid[..., None], sp, sp[:, 0:1, :])
    nxt = np.roll(sp, -1, axis=1)
    area = 0.5 * np.abs(np.sum(sp[..., 0] * nxt[..., 1] - nxt[..., 0] * sp[..., 1], axis=1))
    area = np.where(count >= 3, area, 0.0)
    return np.where(area < AREA_EPS, 0.0, area)


def batch_rotated_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise rotated IoU of paired (N, 5) arrays (b may broadcast from (1, 5))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    a, b = np.broadcast_arrays(a, b)
    inter = batch_intersection_area(a, b)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou_one_to_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    """IoU of one (5,) box against (M, 5) boxes, skipping AABB-disjoint pairs."""
    others = np.asarray(others, dtype=np.float64).reshape(-1, 5)
    out = np.zeros(others.shape[0])
    if others.shape[0] == 0:
        return out
    ba = aabb_np(box)[0]
    oa = aabb_np(others)
    hit = ~((oa[:, 2] < ba[0]) | (ba[2] < oa[:, 0]) | (oa[:, 3] < ba[1]) | (ba[3] < oa[:, 1]))
    if hit.any():
        out[hit] = batch_rotated_iou(others[hit], np.asarray(box, dtype=np.float64)[None, :])
    return out
