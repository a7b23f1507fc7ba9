import numpy as np
import pytest

from obbkit import fusion as F
from obbkit.checks import FUSION_CASES, seeded_shapes


def naive_conv2d(x, k, b, pad):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    oh, ow = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                s = b[o]
                for c in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            y, xx = i + di - pad, j + dj - pad
                            if 0 <= y < h and 0 <= xx < w:
                                s += k[o, c, di, dj] * x[c, y, xx]
                out[o, i, j] = s
    return out


class TestPrimitives:
    def test_conv1x1_loops(self, rng):
        x = rng.standard_normal((3, 4, 5))
        w = rng.standard_normal((2, 3))
        b = rng.standard_normal(2)
        ref = np.zeros((2, 4, 5))
        for o in range(2):
            for i in range(4):
                for j in range(5):
                    ref[o, i, j] = b[o] + sum(w[o, c] * x[c, i, j] for c in range(3))
        assert np.allclose(F.conv1x1(x, w, b), ref, atol=1e-12)

    def test_conv1x1_identity(self, rng):
        x = rng.standard_normal((4, 3, 3))
        assert np.array_equal(F.conv1x1(x, np.eye(4)), x)

    @pytest.mark.parametrize("pad,ks", [(3, 7), (1, 3), (0, 3)])
    def test_conv2d_loops(self, rng, pad, ks):
        x = rng.standard_normal((2, 6, 5))
        k = rng.standard_normal((3, 2, ks, ks))
        b = rng.standard_normal(3)
        assert np.allclose(F.conv2d(x, k, b, pad), naive_conv2d(x, k, b, pad), atol=1e-12)

    def test_conv7x7_keeps_shape(self, rng):
        x = rng.standard_normal((2, 5, 4))
        assert F.conv_kxk(x, rng.standard_normal((1, 2, 7, 7))).shape == (1, 5, 4)

    def test_pooling(self):
        x = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
        assert F.gap(x).tolist() == [2.5, 8.5]
        assert F.gmp(x).tolist() == [5.0, 11.0]

    def test_gmp_backward_first_maximiser(self):
        x = np.array([[[1.0, 3.0], [3.0, 0.0]]])
        g = F.gmp_backward(np.array([2.0]), x)
        assert g.tolist() == [[[0.0, 2.0], [0.0, 0.0]]]

    def test_upsample(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        up = F.upsample2x_nearest(x)
        assert up[0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        assert np.array_equal(F.upsample2x_backward(np.ones((1, 4, 4))), np.full((1, 2, 2), 4.0))

    def test_sigmoid_stable(self):
        s = F.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        assert s.tolist() == [0.0, 0.5, 1.0]

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            F.as_tensor(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            F.conv1x1(np.zeros((2, 2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            F.as_tensor(np.full((1, 1, 1), np.nan))


class TestCIM:
    def test_channel_bookkeeping(self):
        # channel c of the low map holds the value c; upsampled high map holds 4 + c
        low = np.broadcast_to(np.arange(4.0)[:, None, None], (4, 4, 4)).copy()
        high = np.broadcast_to(np.arange(4.0, 8.0)[:, None, None], (4, 2, 2)).copy()
        xl, xh = F.cim(low, high)
        assert [xl[c, 0, 0] for c in range(4)] == [0, 1, 6, 7]
        assert [xh[c, 0, 0] for c in range(4)] == [4, 5, 2, 3]

    def test_permutation_property(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            c = int(r.choice([2, 4, 6, 8]))
            h, w = int(r.integers(1, 5)), int(r.integers(1, 5))
            low, high = r.standard_normal((c, 2 * h, 2 * w)), r.standard_normal((c, h, w))
            xl, xh = F.cim(low, high)
            up = F.upsample2x_nearest(high)
            both = np.concatenate([low, up])
            got = np.concatenate([xl, xh])
            # same multiset of channels, nothing altered
            assert np.array_equal(np.sort(both.reshape(2 * c, -1), axis=0), np.sort(got.reshape(2 * c, -1), axis=0))
            half = c // 2
            assert np.array_equal(xl[:half], low[:half]) and np.array_equal(xl[half:], up[half:])
            assert np.array_equal(xh[:half], up[:half]) and np.array_equal(xh[half:], low[half:])

    def test_odd_channels(self):
        with pytest.raises(ValueError):
            F.cim(np.zeros((3, 4, 4)), np.zeros((3, 2, 2)))

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            F.cim(np.zeros((2, 4, 4)), np.zeros((2, 3, 3)))


class TestBlocks:
    def test_bcf_zero_h_is_shortcut(self, rng):
        p = F.init_bcf_params(4, rng)
        p["h_w"][:] = 0
        p["h_b"][:] = 0
        xl, xh = rng.standard_normal((2, 4, 3, 3))
        assert np.array_equal(F.bcf(xl, xh, p)[0], xl)

    def test_bcf_manual(self, rng):
        p = F.init_bcf_params(2, rng)
        xl, xh = rng.standard_normal((2, 2, 2, 2))
        out = F.bcf(xl, xh, p)[0]
        i, j = 1, 0
        f = p["f_w"] @ xl[:, i, j] + p["f_b"]
        g = p["g_w"] @ xh[:, i, j] + p["g_b"]
        assert np.allclose(out[:, i, j], p["h_w"] @ (f * g) + p["h_b"] + xl[:, i, j], atol=1e-12)

    def test_bcfn_shapes(self, rng):
        pyr = [rng.standard_normal((4, 16, 16)), rng.standard_normal((4, 8, 8)), rng.standard_normal((4, 4, 4))]
        outs, _ = F.bcfn_forward(pyr, F.init_bcf_params(4, rng))
        assert [o.shape for o in outs] == [(4, 16, 16), (4, 8, 8)]

    def test_bcfn_errors(self, rng):
        with pytest.raises(ValueError):
            F.bcfn_forward([rng.standard_normal((4, 4, 4))], {})
        with pytest.raises(ValueError):
            F.bcfn_forward([rng.standard_normal((4, 4, 4)), rng.standard_normal((4, 3, 3))],
                           F.init_bcf_params(4, rng))

    def test_laa_unit_weights(self, rng):
        # zero att_w and unit att_b leave a plain 1x1 reduction of the concatenation
        c, n = 2, 2
        p = F.init_laa_params(c, n, rng)
        p["att_w"][:] = 0
        p["att_b"][:] = 1
        maps = rng.standard_normal((3, c, 3, 3))
        out = F.laa(maps[0], list(maps[1:]), p)[0]
        assert np.allclose(out, F.conv1x1(np.concatenate(maps), p["red_w"], p["red_b"]), atol=1e-12)

    def test_ssa_zero_scale_identity(self, rng):
        x = rng.standard_normal((4, 5, 5))
        assert np.array_equal(F.ssa(x, F.init_ssa_params(4, rng, layer_scale=0.0))[0], x)

    def test_ssa_manual(self, rng):
        x = rng.standard_normal((3, 4, 4))
        p = F.init_ssa_params(3, rng, layer_scale=0.5)
        m = np.stack([x.mean(0), x.max(0)])
        a = 1 / (1 + np.exp(-naive_conv2d(m, p["conv_k"], p["conv_b"], 3)))
        assert np.allclose(F.ssa(x, p)[0], x + 0.5 * a * x, atol=1e-12)

    def test_deterministic(self):
        a = F.init_bcf_params(4, np.random.default_rng(5))
        b = F.init_bcf_params(4, np.random.default_rng(5))
        assert all(np.array_equal(a[k], b[k]) for k in F.BCF_KEYS)


class TestGradients:
    @pytest.mark.parametrize("name", list(FUSION_CASES))
    def test_finite_differences(self, name):
        for si, (c, h, w) in enumerate(seeded_shapes(4, 99)):
            fwd, bwd, arrays = FUSION_CASES[name](np.random.default_rng([99, si]), c, h, w)
            errs = F.finite_diff_errors(fwd, bwd, arrays, max_coords=60, seed=si)
            assert max(errs.values()) <= 1e-4, errs

    def test_linear_conv1x1_tight(self, rng):
        # central differences are exact for a linear map up to rounding
        fwd, bwd, arrays = FUSION_CASES["conv1x1"](rng, 4, 5, 5)
        assert F.finite_diff_check(fwd, bwd, arrays, step=1e-3, max_coords=None) <= 1e-9

    def test_wrong_gradient_is_caught(self, rng):
        fwd, bwd, arrays = FUSION_CASES["bcf"](rng, 2, 3, 3)

        def bad(a, d):
            g = bwd(a, d)
            g["h_w"] = g["h_w"] * 1.01
            return g
        assert F.finite_diff_check(fwd, bad, arrays) > 1e-3

    def test_gradient_shape_checked(self, rng):
        fwd, _, arrays = FUSION_CASES["upsample"](rng, 2, 3, 3)
        with pytest.raises(ValueError):
            F.finite_diff_check(fwd, lambda a, d: {"x": np.zeros(3)}, arrays)


class TestParamBlobs:
    def test_roundtrip(self, tmp_path, rng):
        p = {**F.init_bcf_params(4, rng), "extra": rng.standard_normal((2, 3, 1))}
        F.save_params(p, tmp_path / "bcf")
        back = F.load_params(tmp_path / "bcf")
        assert set(back) == set(p)
        assert all(np.array_equal(back[k], p[k]) for k in p)

    def test_little_endian_layout(self, tmp_path):
        F.save_params({"a": np.array([1.0, 2.0])}, tmp_path / "x")
        raw = (tmp_path / "x.bin").read_bytes()
        assert raw == np.array([1.0, 2.0], dtype="<f8").tobytes()

    def test_truncated_blob(self, tmp_path):
        F.save_params({"a": np.ones(4)}, tmp_path / "x")
        (tmp_path / "x.bin").write_bytes(b"\0" * 8)
        with pytest.raises(ValueError):
            F.load_params(tmp_path / "x")
