"""Cross-level feature fusion and decoupled attention, forward and backward.

Feature maps are float64 numpy arrays shaped ``(C, H, W)``. Parameter sets
are plain ``dict[str, ndarray]`` so they serialise and perturb uniformly.

Composite blocks return ``(out, cache)`` from the forward pass; the matching
``*_backward`` takes the upstream gradient and that cache and returns input
gradients plus a dict of parameter gradients.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_SCALE_INIT = 1e-5


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def conv1x1(x, weight, bias=None) -> np.ndarray:
    """Per-pixel linear map: ``weight`` is (C_out, C_in)."""
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ValueError(f"weight {weight.shape} does not match input channels {x.shape[0]}")
    out = np.einsum("oc,chw->ohw", weight, x)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[:, None, None]
    return out


def conv1x1_backward(dout, x, weight):
    dx = np.einsum("oc,ohw->chw", weight, dout)
    dw = np.einsum("ohw,chw->oc", dout, x)
    db = dout.sum(axis=(1, 2))
    return dx, dw, db


def conv2d(x, kernel, bias=None, padding: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation; ``kernel`` is (C_out, C_in, kh, kw)."""
    x = as_tensor(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise ValueError(f"kernel {kernel.shape} does not match input channels {x.shape[0]}")
    kh, kw = kernel.shape[2:]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ValueError("kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    out = np.einsum("chwij,ocij->ohw", win, kernel)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[:, None, None]
    return out


def conv2d_backward(dout, x, kernel, padding: int = 0):
    kh, kw = kernel.shape[2:]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    dk = np.einsum("chwij,ohw->ocij", win, dout)
    db = dout.sum(axis=(1, 2))
    dxp = np.zeros_like(xp)
    ho, wo = dout.shape[1:]
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + ho, j:j + wo] += np.einsum("oc,ohw->chw", kernel[:, :, i, j], dout)
    dx = dxp[:, padding:padding + x.shape[1], padding:padding + x.shape[2]]
    return dx, dk, db


def conv_kxk(x, kernel, bias=None, padding: int = 3) -> np.ndarray:
    """Same-size spatial convolution (7x7 with padding 3 by default)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape[2] != 2 * padding + 1 or kernel.shape[3] != 2 * padding + 1:
        raise ValueError("padding does not preserve spatial size for this kernel")
    return conv2d(x, kernel, bias, padding)


def gap(x) -> np.ndarray:
    return as_tensor(x).mean(axis=(1, 2))


def gap_backward(dout, shape):
    c, h, w = shape
    return np.broadcast_to(np.asarray(dout)[:, None, None] / (h * w), shape).copy()


def gmp(x) -> np.ndarray:
    return as_tensor(x).max(axis=(1, 2))


def gmp_backward(dout, x):
    """Routes each channel's gradient to its first (row-major) maximiser."""
    c, h, w = x.shape
    flat = x.reshape(c, -1)
    idx = flat.argmax(axis=1)
    dx = np.zeros_like(flat)
    dx[np.arange(c), idx] = dout
    return dx.reshape(x.shape)


def upsample2x_nearest(x) -> np.ndarray:
    x = as_tensor(x)
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x_backward(dout):
    c, h2, w2 = dout.shape
    return dout.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


# ---------------------------------------------------------------------------
# channel interaction + bilinear fusion
# ---------------------------------------------------------------------------


def cim(p_low, p_high):
    """Swap channel halves between a low-level map and the upsampled high-level map.

    Returns ``(x_low, x_high)`` where ``x_low`` keeps the first half of
    ``p_low`` and takes the second half of ``up(p_high)``, and ``x_high``
    the complementary halves.
    """
    p_low, p_high = as_tensor(p_low), as_tensor(p_high)
    c = p_low.shape[0]
    if c % 2:
        raise ValueError(f"channel count must be even, got {c}")
    up = upsample2x_nearest(p_high)
    if up.shape != p_low.shape:
        raise ValueError(f"high-level map {p_high.shape} is not half the size of {p_low.shape}")
    half = c // 2
    x_low = np.concatenate([p_low[:half], up[half:]], axis=0)
    x_high = np.concatenate([up[:half], p_low[half:]], axis=0)
    return x_low, x_high


def cim_backward(d_low, d_high):
    half = d_low.shape[0] // 2
    dp_low = np.concatenate([d_low[:half], d_high[half:]], axis=0)
    d_up = np.concatenate([d_high[:half], d_low[half:]], axis=0)
    return dp_low, upsample2x_backward(d_up)


BCF_KEYS = ("f_w", "f_b", "g_w", "g_b", "h_w", "h_b")


def init_bcf_params(c: int, rng: np.random.Generator, scale: float = 0.5) -> dict:
    p = {}
    for name in "fgh":
        p[f"{name}_w"] = rng.normal(0.0, scale / np.sqrt(c), (c, c))
        p[f"{name}_b"] = rng.normal(0.0, 0.1, c)
    return p


def bcf(x_low, x_high, params: Mapping[str, np.ndarray], shortcut=None):
    """``h(f(x_low) * g(x_high)) + shortcut``; shortcut defaults to ``x_low``."""
    x_low, x_high = as_tensor(x_low), as_tensor(x_high)
    if x_low.shape != x_high.shape:
        raise ValueError(f"shape mismatch {x_low.shape} vs {x_high.shape}")
    if shortcut is None:
        shortcut = x_low
    shortcut = as_tensor(shortcut)
    if shortcut.shape != x_low.shape:
        raise ValueError("shortcut shape mismatch")
    fl = conv1x1(x_low, params["f_w"], params["f_b"])
    gh = conv1x1(x_high, params["g_w"], params["g_b"])
    prod = fl * gh
    out = conv1x1(prod, params["h_w"], params["h_b"]) + shortcut
    return out, (x_low, x_high, fl, gh, prod, params)


def bcf_backward(dout, cache):
    """Returns ``(d_x_low, d_x_high, d_shortcut, param_grads)``."""
    x_low, x_high, fl, gh, prod, params = cache
    dprod, dhw, dhb = conv1x1_backward(dout, prod, params["h_w"])
    dxl, dfw, dfb = conv1x1_backward(dprod * gh, x_low, params["f_w"])
    dxh, dgw, dgb = conv1x1_backward(dprod * fl, x_high, params["g_w"])
    grads = {"f_w": dfw, "f_b": dfb, "g_w": dgw, "g_b": dgb, "h_w": dhw, "h_b": dhb}
    return dxl, dxh, dout, grads


def bcfn_level(p_low, p_high, params):
    x_low, x_high = cim(p_low, p_high)
    out, cache = bcf(x_low, x_high, params, shortcut=p_low)
    return out, cache


def bcfn_level_backward(dout, cache):
    dxl, dxh, dshort, grads = bcf_backward(dout, cache)
    dp_low, dp_high = cim_backward(dxl, dxh)
    return dp_low + dshort, dp_high, grads


def bcfn_forward(pyramid: Sequence[np.ndarray], params):
    """Fuse each adjacent pair of a pyramid; n levels in, n-1 maps out.

    ``params`` is one BCF parameter dict per output level (or a single dict
    shared by all levels). Output ``i`` has the shape of ``pyramid[i]``.
    """
    if len(pyramid) < 2:
        raise ValueError("need at least two pyramid levels")
    pyramid = [as_tensor(p) for p in pyramid]
    c = pyramid[0].shape[0]
    for lo, hi in zip(pyramid[:-1], pyramid[1:]):
        if lo.shape[0] != c or hi.shape[0] != c:
            raise ValueError("pyramid levels must share a channel count")
        if lo.shape[1] != 2 * hi.shape[1] or lo.shape[2] != 2 * hi.shape[2]:
            raise ValueError(f"levels {lo.shape} and {hi.shape} are not 2x apart")
    if isinstance(params, Mapping):
        params = [params] * (len(pyramid) - 1)
    if len(params) != len(pyramid) - 1:
        raise ValueError("need one parameter set per fused level")
    outs, caches = [], []
    for i in range(len(pyramid) - 1):
        out, cache = bcfn_level(pyramid[i], pyramid[i + 1], params[i])
        outs.append(out)
        caches.append(cache)
    return outs, caches


def bcfn_backward(douts, caches):
    """Returns ``(pyramid_grads, per_level_param_grads)``."""
    n = len(caches) + 1
    dpyr = [None] * n
    pgrads = []
    for i, (d, cache) in enumerate(zip(douts, caches)):
        dlo, dhi, g = bcfn_level_backward(d, cache)
        dpyr[i] = dlo if dpyr[i] is None else dpyr[i] + dlo
        dpyr[i + 1] = dhi if dpyr[i + 1] is None else dpyr[i + 1] + dhi
        pgrads.append(g)
    return dpyr, pgrads


# ---------------------------------------------------------------------------
# layer attention aggregation + simple spatial attention
# ---------------------------------------------------------------------------


def init_laa_params(c: int, n: int, rng: np.random.Generator, scale: float = 0.5) -> dict:
    cc = (n + 1) * c
    return {
        "att_w": rng.normal(0.0, scale / np.sqrt(cc), (cc, cc)),
        "att_b": rng.normal(1.0, 0.1, cc),
        "red_w": rng.normal(0.0, scale / np.sqrt(cc), (c, cc)),
        "red_b": rng.normal(0.0, 0.1, c),
    }


def laa(x_fpn, x_convs: Sequence[np.ndarray], params):
    """Concatenate the maps, weight channels by a linear map of their means, reduce to C.

    The attention weights carry no activation and are applied to the
    concatenated features before the reducing 1x1 convolution.
    """
    x_fpn = as_tensor(x_fpn)
    if len(x_convs) < 1:
        raise ValueError("need at least one stacked-conv map")
    maps = [x_fpn] + [as_tensor(x) for x in x_convs]
    if any(m.shape != x_fpn.shape for m in maps):
        raise ValueError("all LAA inputs must share a shape")
    x_cat = np.concatenate(maps, axis=0)
    pooled = gap(x_cat)
    w = params["att_w"] @ pooled + params["att_b"]
    scaled = x_cat * w[:, None, None]
    out = conv1x1(scaled, params["red_w"], params["red_b"])
    return out, (x_cat, pooled, w, scaled, params, len(maps))


def laa_backward(dout, cache):
    """Returns ``(d_x_fpn, [d_x_conv...], param_grads)``."""
    x_cat, pooled, w, scaled, params, nmaps = cache
    dscaled, dred_w, dred_b = conv1x1_backward(dout, scaled, params["red_w"])
    dx_cat = dscaled * w[:, None, None]
    dw = np.einsum("chw,chw->c", dscaled, x_cat)
    datt_w = np.outer(dw, pooled)
    datt_b = dw
    dpooled = params["att_w"].T @ dw
    dx_cat = dx_cat + gap_backward(dpooled, x_cat.shape)
    parts = np.split(dx_cat, nmaps, axis=0)
    grads = {"att_w": datt_w, "att_b": datt_b, "red_w": dred_w, "red_b": dred_b}
    return parts[0], parts[1:], grads


def init_ssa_params(c: int, rng: np.random.Generator, layer_scale: float = LAYER_SCALE_INIT,
                    k: int = 7) -> dict:
    return {
        "conv_k": rng.normal(0.0, 0.1, (1, 2, k, k)),
        "conv_b": np.zeros(1),
        "scale": np.full(c, float(layer_scale)),
    }


def ssa(x, params):
    """Residual spatial attention: ``x + scale * sigmoid(conv([mean_c, max_c])) * x``."""
    x = as_tensor(x)
    k = params["conv_k"]
    pad = k.shape[-1] // 2
    m = np.stack([x.mean(axis=0), x.max(axis=0)])
    z = conv2d(m, k, params["conv_b"], pad)
    a = sigmoid(z)
    scale = np.asarray(params["scale"], dtype=np.float64)[:, None, None]
    out = x + scale * (a * x)
    return out, (x, m, a, params, pad)


def ssa_backward(dout, cache):
    x, m, a, params, pad = cache
    scale = np.asarray(params["scale"], dtype=np.float64)
    dx = dout + scale[:, None, None] * a * dout
    dscale = np.einsum("chw,chw->c", dout, a * x)
    da = np.einsum("c,chw->hw", scale, dout * x)[None]
    dz = da * a * (1.0 - a)
    dm, dk, db = conv2d_backward(dz, m, params["conv_k"], pad)
    c = x.shape[0]
    dx = dx + dm[0][None] / c
    amax = x.argmax(axis=0)
    rows, cols = np.indices(amax.shape)
    np.add.at(dx, (amax, rows, cols), dm[1])
    return dx, {"conv_k": dk, "conv_b": db, "scale": dscale}


def ldam(x_fpn, x_convs, laa_params, ssa_params):
    mid, c1 = laa(x_fpn, x_convs, laa_params)
    out, c2 = ssa(mid, ssa_params)
    return out, (c1, c2)


def ldam_backward(dout, cache):
    c1, c2 = cache
    dmid, g_ssa = ssa_backward(dout, c2)
    dfpn, dconvs, g_laa = laa_backward(dmid, c1)
    return dfpn, dconvs, g_laa, g_ssa


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_diff_errors(forward: Callable[[dict], np.ndarray],
                       backward: Callable[[dict, np.ndarray], dict],
                       arrays: Mapping[str, np.ndarray], step: float = 1e-6,
                       max_coords: int | None = 200, seed: int = 0) -> dict[str, float]:
    """Central-difference check of ``backward`` against ``forward``.

    The scalar objective is ``sum(forward(arrays) * R)`` for a fixed random
    ``R``. For each array, up to ``max_coords`` coordinates are perturbed;
    the error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    """
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    out = np.asarray(forward(arrays))
    r = rng.standard_normal(out.shape)
    grads = backward(arrays, r)
    errors = {}
    for key, arr in arrays.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != arr.shape:
            raise ValueError(f"gradient for {key} has shape {g.shape}, expected {arr.shape}")
        n = arr.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        flat = arr.reshape(-1)
        num = np.empty(coords.size)
        for i, ci in enumerate(coords):
            orig = flat[ci]
            flat[ci] = orig + step
            lp = float(np.sum(np.asarray(forward(arrays)) * r))
            flat[ci] = orig - step
            lm = float(np.sum(np.asarray(forward(arrays)) * r))
            flat[ci] = orig
            num[i] = (lp - lm) / (2.0 * step)
        ana = g.reshape(-1)[coords]
        denom = max(np.max(np.abs(ana)), np.max(np.abs(num)))
        errors[key] = 0.0 if denom == 0.0 else float(np.max(np.abs(ana - num)) / denom)
    return errors


def finite_diff_check(forward, backward, arrays, step: float = 1e-6,
                      max_coords: int | None = 200, seed: int = 0) -> float:
    """Maximum relative error over every checked array."""
    return max(finite_diff_errors(forward, backward, arrays, step, max_coords, seed).values())


# ---------------------------------------------------------------------------
# parameter blobs
# ---------------------------------------------------------------------------


def save_params(params: Mapping[str, np.ndarray], stem) -> tuple[Path, Path]:
    """Write ``<stem>.bin`` (little-endian float64) and ``<stem>.json`` (shape manifest)."""
    stem = Path(stem)
    manifest, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.reshape(-1).tobytes())
        offset += int(arr.size)
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps({"dtype": "float64-le", "tensors": manifest}, indent=2, sort_keys=True) + "\n")
    return bin_path, json_path


def load_params(stem) -> dict[str, np.ndarray]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    data = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    out = {}
    for entry in manifest["tensors"]:
        start, count = entry["offset"], entry["count"]
        if start + count > data.size:
            raise ValueError(f"blob too short for tensor {entry['name']}")
        out[entry["name"]] = data[start:start + count].astype(np.float64).reshape(entry["shape"])
    return out
