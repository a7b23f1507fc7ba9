"""Finite-difference verification runs behind the ``losscheck`` and ``fusioncheck`` commands."""
from __future__ import annotations

import math

import numpy as np

from . import fusion as F
from .losses import ARL_DEFAULTS, LossParams, arl, focal_loss

LOSS_TOL = 1e-6
FUSION_TOL = 1e-4


def _rel(a: float, n: float) -> float:
    d = max(abs(a), abs(n))
    return 0.0 if d == 0.0 else abs(a - n) / d


def loss_gradient_report(n: int = 1000, seed: int = 0, step: float = 1e-6) -> dict:
    """Analytic vs central-difference derivatives of the focal loss and ARL.

    The first quarter of the configurations use the ARL defaults
    (gamma 1.5, beta 2.5); the rest draw gamma, beta and alpha at random.
    """
    rng = np.random.default_rng(seed)
    worst = {"focal_dp": 0.0, "arl_dp": 0.0, "arl_dt": 0.0}
    for i in range(n):
        p = float(rng.uniform(0.02, 0.98))
        y = int(rng.integers(0, 2))
        t = float(rng.uniform(0.01, 0.99))
        if i < n // 4:
            params = LossParams(alpha=0.25, gamma=ARL_DEFAULTS.gamma, beta=ARL_DEFAULTS.beta)
        else:
            params = LossParams(alpha=float(rng.uniform(0.05, 1.0)), gamma=float(rng.uniform(0.0, 3.0)),
                                beta=float(rng.uniform(0.0, 4.0)))
        _, g = focal_loss(p, y, params)
        num = (focal_loss(p + step, y, params)[0] - focal_loss(p - step, y, params)[0]) / (2 * step)
        worst["focal_dp"] = max(worst["focal_dp"], _rel(g, num))
        _, gp, gt = arl(p, y, t, params)
        num_p = (arl(p + step, y, t, params)[0] - arl(p - step, y, t, params)[0]) / (2 * step)
        num_t = (arl(p, y, t + step, params)[0] - arl(p, y, t - step, params)[0]) / (2 * step)
        worst["arl_dp"] = max(worst["arl_dp"], _rel(gp, num_p))
        worst["arl_dt"] = max(worst["arl_dt"], _rel(gt, num_t))
    spot = arl(0.5, 1, 0.72, LossParams(gamma=1.5, beta=2.5))[0]
    return {
        "configurations": n,
        "seed": seed,
        "step": step,
        "tolerance": LOSS_TOL,
        "max_rel_err": worst,
        "arl_spot_value": spot,
        "arl_spot_expected": 0.72 * math.exp(1.8) * math.log(2.0),
        "passed": all(v <= LOSS_TOL for v in worst.values()),
    }


# ---------------------------------------------------------------------------
# fusion cases: each returns (forward, backward, arrays) for finite_diff_check
# ---------------------------------------------------------------------------


def case_conv1x1(rng, c, h, w):
    arrays = {"x": rng.standard_normal((c, h, w)), "w": rng.standard_normal((c + 1, c)),
              "b": rng.standard_normal(c + 1)}

    def fwd(a):
        return F.conv1x1(a["x"], a["w"], a["b"])

    def bwd(a, d):
        dx, dw, db = F.conv1x1_backward(d, a["x"], a["w"])
        return {"x": dx, "w": dw, "b": db}

    return fwd, bwd, arrays


def case_conv7x7(rng, c, h, w):
    arrays = {"x": rng.standard_normal((c, h, w)), "k": rng.standard_normal((2, c, 7, 7)) * 0.2,
              "b": rng.standard_normal(2)}

    def fwd(a):
        return F.conv_kxk(a["x"], a["k"], a["b"], 3)

    def bwd(a, d):
        dx, dk, db = F.conv2d_backward(d, a["x"], a["k"], 3)
        return {"x": dx, "k": dk, "b": db}

    return fwd, bwd, arrays


def case_pool(rng, c, h, w):
    arrays = {"x": rng.standard_normal((c, h, w))}

    def fwd(a):
        return np.concatenate([F.gap(a["x"]), F.gmp(a["x"])])

    def bwd(a, d):
        return {"x": F.gap_backward(d[:c], a["x"].shape) + F.gmp_backward(d[c:], a["x"])}

    return fwd, bwd, arrays


def case_upsample(rng, c, h, w):
    arrays = {"x": rng.standard_normal((c, h, w))}
    return (lambda a: F.upsample2x_nearest(a["x"]),
            lambda a, d: {"x": F.upsample2x_backward(d)}, arrays)


def case_bcf(rng, c, h, w):
    params = F.init_bcf_params(c, rng)
    arrays = {"x_low": rng.standard_normal((c, h, w)), "x_high": rng.standard_normal((c, h, w)), **params}

    def fwd(a):
        return F.bcf(a["x_low"], a["x_high"], a)[0]

    def bwd(a, d):
        _, cache = F.bcf(a["x_low"], a["x_high"], a)
        dxl, dxh, dshort, g = F.bcf_backward(d, cache)
        return {"x_low": dxl + dshort, "x_high": dxh, **g}

    return fwd, bwd, arrays


def case_bcfn(rng, c, h, w, levels: int = 3):
    """A pyramid of ``levels`` maps (two fused outputs for the default 3)."""
    arrays = {}
    for i in range(levels):
        s = 2 ** (levels - 1 - i)
        arrays[f"p{i}"] = rng.standard_normal((c, h * s, w * s))
    for i in range(levels - 1):
        for k, v in F.init_bcf_params(c, rng).items():
            arrays[f"l{i}_{k}"] = v

    def split(a):
        pyr = [a[f"p{i}"] for i in range(levels)]
        params = [{k: a[f"l{i}_{k}"] for k in F.BCF_KEYS} for i in range(levels - 1)]
        return pyr, params

    def fwd(a):
        outs, _ = F.bcfn_forward(*split(a))
        return np.concatenate([o.ravel() for o in outs])

    def bwd(a, d):
        pyr, params = split(a)
        outs, caches = F.bcfn_forward(pyr, params)
        douts, off = [], 0
        for o in outs:
            douts.append(d[off:off + o.size].reshape(o.shape))
            off += o.size
        dpyr, pg = F.bcfn_backward(douts, caches)
        grads = {f"p{i}": g for i, g in enumerate(dpyr)}
        for i, g in enumerate(pg):
            grads.update({f"l{i}_{k}": v for k, v in g.items()})
        return grads

    return fwd, bwd, arrays


def case_laa(rng, c, h, w, n: int = 2):
    arrays = {"x_fpn": rng.standard_normal((c, h, w))}
    for i in range(n):
        arrays[f"x_conv{i}"] = rng.standard_normal((c, h, w))
    arrays.update(F.init_laa_params(c, n, rng))

    def fwd(a):
        return F.laa(a["x_fpn"], [a[f"x_conv{i}"] for i in range(n)], a)[0]

    def bwd(a, d):
        _, cache = F.laa(a["x_fpn"], [a[f"x_conv{i}"] for i in range(n)], a)
        dfpn, dconvs, g = F.laa_backward(d, cache)
        return {"x_fpn": dfpn, **{f"x_conv{i}": v for i, v in enumerate(dconvs)}, **g}

    return fwd, bwd, arrays


def case_ssa(rng, c, h, w):
    arrays = {"x": rng.standard_normal((c, h, w)), **F.init_ssa_params(c, rng, layer_scale=1.0)}
    arrays["scale"] = rng.uniform(0.5, 1.5, c)
    arrays["conv_b"] = rng.standard_normal(1)

    def fwd(a):
        return F.ssa(a["x"], a)[0]

    def bwd(a, d):
        _, cache = F.ssa(a["x"], a)
        dx, g = F.ssa_backward(d, cache)
        return {"x": dx, **g}

    return fwd, bwd, arrays


def case_ldam(rng, c, h, w, n: int = 2):
    arrays = {"x_fpn": rng.standard_normal((c, h, w))}
    for i in range(n):
        arrays[f"x_conv{i}"] = rng.standard_normal((c, h, w))
    arrays.update({f"laa_{k}": v for k, v in F.init_laa_params(c, n, rng).items()})
    ssa_p = F.init_ssa_params(c, rng, layer_scale=1.0)
    ssa_p["scale"] = rng.uniform(0.5, 1.5, c)
    arrays.update({f"ssa_{k}": v for k, v in ssa_p.items()})

    def split(a):
        lp = {k[4:]: v for k, v in a.items() if k.startswith("laa_")}
        sp = {k[4:]: v for k, v in a.items() if k.startswith("ssa_")}
        return [a[f"x_conv{i}"] for i in range(n)], lp, sp

    def fwd(a):
        convs, lp, sp = split(a)
        return F.ldam(a["x_fpn"], convs, lp, sp)[0]

    def bwd(a, d):
        convs, lp, sp = split(a)
        _, cache = F.ldam(a["x_fpn"], convs, lp, sp)
        dfpn, dconvs, gl, gs = F.ldam_backward(d, cache)
        out = {"x_fpn": dfpn, **{f"x_conv{i}": v for i, v in enumerate(dconvs)}}
        out.update({f"laa_{k}": v for k, v in gl.items()})
        out.update({f"ssa_{k}": v for k, v in gs.items()})
        return out

    return fwd, bwd, arrays


FUSION_CASES = {
    "conv1x1": case_conv1x1,
    "conv7x7": case_conv7x7,
    "gap_gmp": case_pool,
    "upsample": case_upsample,
    "bcf": case_bcf,
    "bcfn": case_bcfn,
    "laa": case_laa,
    "ssa": case_ssa,
    "ldam": case_ldam,
}


def seeded_shapes(n: int, seed: int) -> list[tuple[int, int, int]]:
    rng = np.random.default_rng(seed)
    return [(int(rng.choice([2, 4, 8])), int(rng.integers(3, 9)), int(rng.integers(3, 9))) for _ in range(n)]


def fusion_gradient_report(n_shapes: int = 20, seed: int = 0, step: float = 1e-6,
                           max_coords: int = 200) -> dict:
    shapes = seeded_shapes(n_shapes, seed)
    worst = {name: 0.0 for name in FUSION_CASES}
    for si, (c, h, w) in enumerate(shapes):
        for ci, (name, case) in enumerate(FUSION_CASES.items()):
            rng = np.random.default_rng([seed, si, ci])
            fwd, bwd, arrays = case(rng, c, h, w)
            err = F.finite_diff_check(fwd, bwd, arrays, step=step, max_coords=max_coords, seed=si)
            worst[name] = max(worst[name], err)
    rng = np.random.default_rng([seed, n_shapes])
    x = rng.standard_normal((4, 6, 6))
    zero = F.init_ssa_params(4, rng, layer_scale=0.0)
    identity_ok = bool(np.array_equal(F.ssa(x, zero)[0], x))
    return {
        "shapes": [list(s) for s in shapes],
        "seed": seed,
        "step": step,
        "tolerance": FUSION_TOL,
        "max_rel_err": worst,
        "ssa_zero_scale_identity": identity_ok,
        "passed": identity_ok and all(v <= FUSION_TOL for v in worst.values()),
    }
