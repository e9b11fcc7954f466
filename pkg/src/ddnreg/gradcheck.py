"""Finite-difference checks of every differentiable op, in float64.

Inputs are drawn so that central differences never straddle a kink:
LeakyReLU inputs stay away from zero and warp coordinates keep their
fractional part away from lattice planes and the clamp boundary.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .loss import LossConfig, diffusion_reg, ncc_loss, total_loss
from .model import DdnConfig, build_ddn, forward
from .warp import warp_patch

OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self):
        return self.error < self.tol


def _t(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _weighted_sum(out, weights):
    return ad.sum_all(ad.mul(out, weights))


def _safe_flow(rng, shape):
    """Displacements with fractional parts in [0.2, 0.8] and random sign."""
    frac = rng.uniform(0.2, 0.8, size=shape)
    whole = rng.integers(-1, 1, size=shape)
    return whole + frac


def _smooth(rng, shape):
    """Blurred noise stretched to span [0, 1], like a normalised image patch."""
    out = gaussian_filter(rng.random(shape), sigma=(0, 0, 1, 1, 1))
    lo = out.min(axis=(2, 3, 4), keepdims=True)
    hi = out.max(axis=(2, 3, 4), keepdims=True)
    return (out - lo) / (hi - lo)


def op_cases(size=6, seed=0):
    """(name, loss_fn, params, tol) for every single op."""
    rng = np.random.default_rng(seed)
    s = size
    h = max(1, s // 2)
    cases = []

    def proj(shape):
        return rng.standard_normal(shape)

    x, w, b = _t(rng.standard_normal((2, 3, s, s, s))), _t(rng.standard_normal((4, 3, 3, 3, 3))), \
        _t(rng.standard_normal(4))
    wo = proj((2, 4, s, s, s))
    cases.append(("conv3d", lambda: _weighted_sum(ad.conv3d(x, w, b), wo), [x, w, b]))

    x2, w2 = _t(rng.standard_normal((2, 2, s, s, s))), _t(rng.standard_normal((3, 2, 3, 3, 3)))
    out_shape = ad.conv3d(x2, w2, stride=2, padding="valid").shape
    wo2 = proj(out_shape)
    cases.append(("conv3d_stride2_valid",
                  lambda: _weighted_sum(ad.conv3d(x2, w2, stride=2, padding="valid"), wo2), [x2, w2]))

    x3, w3, b3 = _t(rng.standard_normal((2, 4, s, s, s))), _t(rng.standard_normal((3, 4, 1, 1, 1))), \
        _t(rng.standard_normal(3))
    wo3 = proj((2, 3, s, s, s))
    cases.append(("conv3d_pointwise", lambda: _weighted_sum(ad.conv3d(x3, w3, b3), wo3), [x3, w3, b3]))

    xb = _t(rng.standard_normal((2, 4, s, s, s)) * 2 + 1)
    gamma, beta = _t(rng.uniform(0.5, 1.5, 4)), _t(rng.standard_normal(4))
    rm, rv = np.zeros(4), np.ones(4)
    wob = proj(xb.shape)
    cases.append(("batch_norm", lambda: _weighted_sum(
        ad.batch_norm(xb, gamma, beta, rm, rv, training=True), wob), [xb, gamma, beta]))
    rm2, rv2 = rng.standard_normal(4) * 0.1, rng.uniform(0.5, 2.0, 4)
    cases.append(("batch_norm_infer", lambda: _weighted_sum(
        ad.batch_norm(xb, gamma, beta, rm2, rv2, training=False), wob), [xb, gamma, beta]))

    mag = rng.uniform(0.05, 1.0, (2, 4, s, s, s))
    xl = _t(np.where(rng.random(mag.shape) < 0.5, -mag, mag))
    wol = proj(xl.shape)
    cases.append(("leaky_relu", lambda: _weighted_sum(ad.leaky_relu(xl, 0.2), wol), [xl]))

    xa, xc = _t(rng.standard_normal((2, 1, s, s, s))), _t(rng.standard_normal((2, 3, s, s, s)))
    woc = proj((2, 4, s, s, s))
    cases.append(("concat_channels", lambda: _weighted_sum(ad.concat_channels([xa, xc]), woc),
                  [xa, xc]))

    xp = _t(rng.standard_normal((2, 4, s, s, s)))
    wop = proj((2, 4, h, h, h))
    cases.append(("avg_pool3d", lambda: _weighted_sum(ad.avg_pool3d(xp, 2), wop), [xp]))

    xu = _t(rng.standard_normal((2, 4, h, h, h)))
    wou = proj((2, 4, 2 * h, 2 * h, 2 * h))
    cases.append(("upsample_trilinear", lambda: _weighted_sum(ad.upsample_trilinear(xu, 2), wou),
                  [xu]))

    src = _t(_smooth(rng, (2, 1, s, s, s)))
    flow = _t(_safe_flow(rng, (2, 3, s, s, s)))
    wow = proj(src.shape)
    cases.append(("warp_patch", lambda: _weighted_sum(warp_patch(src, flow), wow), [src, flow]))

    a, bt = _t(_smooth(rng, (2, 1, s, s, s))), _t(_smooth(rng, (2, 1, s, s, s)))
    cases.append(("ncc_loss", lambda: ncc_loss(a, bt, window=5), [a, bt]))
    cases.append(("ncc_loss_global", lambda: ncc_loss(a, bt, mode="global"), [a, bt]))

    fd = _t(rng.standard_normal((2, 3, s, s, s)))
    cases.append(("diffusion_reg", lambda: diffusion_reg(fd), [fd]))

    ts, tt = _t(_smooth(rng, (2, 1, s, s, s))), _t(_smooth(rng, (2, 1, s, s, s)))
    tf = _t(_safe_flow(rng, (2, 3, s, s, s)))
    cfg = LossConfig(lambda_smooth=0.5, cc_window=5)
    cases.append(("total_loss", lambda: total_loss(ts, tt, tf, cfg), [ts, tt, tf]))
    return [(name, fn, params, OP_TOL) for name, fn, params in cases]


def composite_case(size=6, seed=0):
    """Whole network plus loss on a tiny configuration, every trainable parameter checked."""
    rng = np.random.default_rng(seed + 1)
    cfg = DdnConfig(patch_size=size, units_per_block=2, growth=2, kernel=3, base_channels=4)
    model = build_ddn(cfg, seed=seed, dtype=np.float64)
    # the fresh fusion conv is all zeros, which would hide every upstream gradient;
    # the bias offset keeps warp coordinates away from lattice planes
    model["fusion.weight"].data[...] = rng.uniform(-0.02, 0.02, model["fusion.weight"].shape)
    model["fusion.bias"].data[...] = [0.45, 0.5, 0.55]
    for name in ("global_head.weight", "local_head.weight"):
        model[name].data[...] = rng.uniform(-0.5, 0.5, model[name].shape)
    src = _smooth(rng, (2, 1, size, size, size))
    tgt = _smooth(rng, (2, 1, size, size, size))
    loss_cfg = LossConfig(lambda_smooth=0.5, cc_window=5)

    def fn():
        flows = forward(model, src, tgt, mode="train")
        return total_loss(src, tgt, flows.fused_flow, loss_cfg)

    params = [p.tensor for p in model.trainable()]
    return ("ddn_forward_total_loss", fn, params, COMPOSITE_TOL)


def run_gradchecks(size=6, eps=1e-3, seed=0, composite=True):
    cases = op_cases(size, seed)
    if composite:
        cases.append(composite_case(size, seed))
    results = []
    for name, fn, params, tol in cases:
        t0 = time.perf_counter()
        err = ad.grad_check(fn, params, eps)
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results
