import math

import numpy as np
import pytest

from obbkit.coding import (
    NEGATIVE,
    BoxTarget,
    assignment_oracle,
    atss_assign,
    decode_box,
    encode_box,
    generate_anchor_points,
    padded_size,
)
from obbkit.geometry import OrientedBox, canonicalize, point_in_box, rotated_iou


def random_scene(rng, size, n):
    gts = []
    for _ in range(n):
        w = rng.uniform(10, 120)
        h = rng.uniform(6, w)
        gts.append(OrientedBox(rng.uniform(0, size), rng.uniform(0, size), w, h, rng.uniform(-math.pi / 2, math.pi / 2)))
    return gts


class TestAnchorPoints:
    def test_counts_1024(self):
        grids = generate_anchor_points(1024, 1024)
        assert [len(g) for g in grids] == [16384, 4096, 1024, 256, 64]
        assert sum(len(g) for g in grids) == 21824

    def test_first_point(self):
        assert tuple(generate_anchor_points(1024, 1024)[0].points[0]) == (4.0, 4.0)

    def test_p7_single_cell(self):
        grids = generate_anchor_points(128, 128, [7])
        assert len(grids[0]) == 1
        assert tuple(grids[0].points[0]) == (64.0, 64.0)

    def test_padding(self):
        assert padded_size(1000) == 1024
        assert padded_size(1024) == 1024
        g = generate_anchor_points(1000, 700, [3])[0]
        assert (g.width, g.height) == (128, 96)

    def test_row_major(self):
        pts = generate_anchor_points(256, 128, [5])[0].points
        assert tuple(pts[1]) == (48.0, 16.0)
        assert tuple(pts[8]) == (16.0, 48.0)

    @pytest.mark.parametrize("args", [(0, 10), (10, -1)])
    def test_bad_dims(self, args):
        with pytest.raises(ValueError):
            generate_anchor_points(*args)

    def test_bad_levels(self):
        with pytest.raises(ValueError):
            generate_anchor_points(128, 128, [2])
        with pytest.raises(ValueError):
            generate_anchor_points(128, 128, [])


class TestBoxCoding:
    def test_centred_axis_aligned(self):
        t = encode_box((0, 0), OrientedBox(0, 0, 4, 2, 0))
        assert t.as_tuple() == pytest.approx((2, 1, 2, 1, 0))

    def test_offset_point(self):
        t = encode_box((1, 0.5), OrientedBox(0, 0, 4, 2, 0))
        assert t.as_tuple() == pytest.approx((3, 1.5, 1, 0.5, 0))

    def test_decode_example(self):
        b = decode_box((10, 10), BoxTarget(3, 1.5, 1, 0.5, 0.0))
        assert b.as_tuple() == pytest.approx((9, 9.5, 4, 2, 0))

    def test_rotated_decode(self):
        # point at the centre of a box turned a quarter-turn-ish
        b = decode_box((5, 5), BoxTarget(1, 2, 3, 2, math.pi / 6))
        c, s = math.cos(math.pi / 6), math.sin(math.pi / 6)
        assert (b.cx, b.cy) == pytest.approx((5 + c, 5 + s))

    def test_outside_point(self):
        t = encode_box((10, 0), OrientedBox(0, 0, 4, 2, 0))
        assert not t.inside and t.r < 0

    def test_decode_rejects_degenerate(self):
        with pytest.raises(ValueError):
            decode_box((0, 0), BoxTarget(1, 1, -1, 1, 0))

    def test_roundtrip(self, rng):
        worst = 0.0
        for _ in range(1000):
            box = canonicalize(OrientedBox(rng.uniform(0, 500), rng.uniform(0, 500), rng.uniform(2, 200),
                                           rng.uniform(2, 200), rng.uniform(-4, 4)))
            # a point inside the box, in box-local coordinates
            u, v = rng.uniform(-0.5, 0.5) * box.w, rng.uniform(-0.5, 0.5) * box.h
            c, s = math.cos(box.theta), math.sin(box.theta)
            p = (box.cx + c * u - s * v, box.cy + s * u + c * v)
            t = encode_box(p, box)
            assert t.inside
            back = decode_box(p, t)
            worst = max(worst, max(abs(x - y) for x, y in zip(back.as_tuple(), box.as_tuple())))
        assert worst < 1e-6


class TestATSS:
    def test_matches_oracle(self, rng):
        grids = generate_anchor_points(256, 256, [3, 4, 5])
        for _ in range(10):
            gts = random_scene(rng, 256, int(rng.integers(1, 8)))
            a, o = atss_assign(grids, gts), assignment_oracle(grids, gts)
            assert np.array_equal(a.labels, o.labels)
            assert np.allclose(a.ious, o.ious, atol=1e-9)

    def test_positives_inside_gt(self, rng):
        grids = generate_anchor_points(512, 512)
        pts = np.concatenate([g.points for g in grids])
        gts = random_scene(rng, 512, 12)
        res = atss_assign(grids, gts)
        assert res.num_positive > 0
        for i in res.positive_indices:
            assert point_in_box(pts[i], gts[res.labels[i]])

    def test_empty_gts(self):
        grids = generate_anchor_points(256, 256)
        res = atss_assign(grids, [])
        assert res.num_positive == 0 and np.all(res.labels == NEGATIVE)

    def test_single_anchor(self):
        grids = generate_anchor_points(128, 128, [7])
        res = atss_assign(grids, [OrientedBox(64, 64, 100, 50, 0.3)])
        # one candidate: mean + std equals its IoU, and the centre is inside
        assert res.labels.tolist() == [0]
        assert res.ious[0] == pytest.approx(rotated_iou(OrientedBox(64, 64, 128, 128), OrientedBox(64, 64, 100, 50, 0.3)))

    def test_symmetric_gts_lowest_index_wins(self):
        # two identical gts tie on every anchor
        g = OrientedBox(100, 100, 60, 30, 0.2)
        res = atss_assign(generate_anchor_points(256, 256), [g, g])
        assert res.num_positive > 0
        assert res.positives_per_gt(2)[1] == 0

    def test_mirror_symmetric_scene(self):
        # gt centred on an anchor, axis-aligned: positives come in mirrored pairs
        grids = generate_anchor_points(256, 256, [3])
        g = OrientedBox(132, 132, 40, 40, 0)
        res = atss_assign(grids, [g])
        pts = grids[0].points[res.positive_indices]
        mirrored = {(264 - x, 264 - y) for x, y in pts}
        assert mirrored == {tuple(p) for p in pts}

    def test_translation_equivariance(self, rng):
        # shifting gts by a multiple of the largest stride shifts positives by whole cells
        grids = generate_anchor_points(512, 512, [3, 4, 5, 6, 7])
        for _ in range(5):
            gts = [OrientedBox(rng.integers(40, 200) + 0.25, rng.integers(40, 200) + 0.5,
                               float(rng.integers(16, 96)), float(rng.integers(8, 16)), rng.integers(-8, 8) / 16)
                   for _ in range(3)]
            moved = [OrientedBox(g.cx + 128, g.cy + 128, g.w, g.h, g.theta) for g in gts]
            a, b = atss_assign(grids, gts), atss_assign(grids, moved)
            off = 0
            for grid in grids:
                la = a.labels[off:off + len(grid)].reshape(grid.height, grid.width)
                lb = b.labels[off:off + len(grid)].reshape(grid.height, grid.width)
                d = 128 // grid.stride
                assert np.array_equal(la[:grid.height - d, :grid.width - d], lb[d:, d:])
                off += len(grid)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            atss_assign(generate_anchor_points(128, 128), [OrientedBox(1, 1, 1, 1)], k=0)
