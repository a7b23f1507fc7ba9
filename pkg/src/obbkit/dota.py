"""DOTA-style quadrilateral annotation files.

Ground-truth lines are ``x1 y1 x2 y2 x3 y3 x4 y4 class [difficulty]``;
detection lines replace the difficulty with a confidence score. Header
lines such as ``imagesource:...`` and ``gsd:...`` are skipped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .geometry import OrientedBox, canonicalize, convex_hull, corners


class DotaFormatError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class Annotation:
    box: OrientedBox
    name: str
    difficult: int = 0
    score: Optional[float] = None


def min_area_rect(points: Iterable[Sequence[float]]) -> OrientedBox:
    """Smallest enclosing rectangle via rotating calipers over hull edges."""
    hull = convex_hull(points).vertices
    if len(hull) < 3:
        raise ValueError("points are degenerate (fewer than 3 hull vertices)")
    best = None
    n = len(hull)
    for i in range(n):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % n]
        ang = math.atan2(y1 - y0, x1 - x0)
        c, s = math.cos(ang), math.sin(ang)
        us = [c * x + s * y for x, y in hull]
        vs = [-s * x + c * y for x, y in hull]
        w, h = max(us) - min(us), max(vs) - min(vs)
        area = w * h
        if best is None or area < best[0] * (1.0 - 1e-12):
            um, vm = (max(us) + min(us)) / 2.0, (max(vs) + min(vs)) / 2.0
            best = (area, c * um - s * vm, s * um + c * vm, w, h, ang)
    _, cx, cy, w, h, ang = best
    return canonicalize(OrientedBox(cx, cy, w, h, ang))


def _parse_line(path, lineno: int, tokens: list[str], with_score: bool) -> Annotation:
    if len(tokens) not in (9, 10):
        raise DotaFormatError(path, lineno, f"expected 9 or 10 tokens, got {len(tokens)}")
    try:
        coords = [float(t) for t in tokens[:8]]
    except ValueError:
        raise DotaFormatError(path, lineno, "non-numeric coordinate") from None
    if not all(math.isfinite(v) for v in coords):
        raise DotaFormatError(path, lineno, "non-finite coordinate")
    name = tokens[8]
    pts = list(zip(coords[0::2], coords[1::2]))
    try:
        box = min_area_rect(pts)
    except ValueError as exc:
        raise DotaFormatError(path, lineno, str(exc)) from None
    if with_score:
        if len(tokens) != 10:
            raise DotaFormatError(path, lineno, "detection line lacks a score")
        try:
            score = float(tokens[9])
        except ValueError:
            raise DotaFormatError(path, lineno, "non-numeric score") from None
        return Annotation(box, name, 0, score)
    difficult = 0
    if len(tokens) == 10:
        try:
            difficult = int(tokens[9])
        except ValueError:
            raise DotaFormatError(path, lineno, "non-integer difficulty") from None
    return Annotation(box, name, difficult)


def parse_dota(path, with_score: bool = False) -> list[Annotation]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith(("imagesource:", "gsd:")):
                continue
            out.append(_parse_line(path, lineno, line.split(), with_score))
    return out


def format_line(a: Annotation) -> str:
    pts = corners(canonicalize(a.box))
    coords = " ".join(f"{v:.6f}" for p in pts for v in p)
    tail = f"{a.score:.6f}" if a.score is not None else str(int(a.difficult))
    return f"{coords} {a.name} {tail}"


def write_dota(annotations: Iterable[Annotation], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(format_line(a) + "\n" for a in annotations))


def read_dir(directory, with_score: bool = False) -> dict[str, list[Annotation]]:
    """All ``*.txt`` files in a directory keyed by file stem, sorted."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return {p.stem: parse_dota(p, with_score) for p in sorted(directory.glob("*.txt"))}
