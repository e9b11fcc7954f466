"""Training objective: negative squared cross-correlation plus diffusion smoothness.

    total = -mean_p CC(p) + lambda * mean_{p,c} sum_axes (forward diff of flow_c)^2

CC(p) is the squared normalised cross-correlation over the w^3 window
centred at p, clipped to the patch so border windows only see real voxels,
or over the whole patch in ``global`` mode.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import add, as_tensor, record, scale
from .errors import ConfigError
from .warp import warp_patch


@dataclass(frozen=True)
class LossConfig:
    lambda_smooth: float = 1.0
    cc_window: int = 9
    eps: float = 1e-5
    cc_mode: str = "local"  # or "global"

    def __post_init__(self):
        if self.cc_window < 3 or self.cc_window % 2 == 0:
            raise ConfigError(f"cc_window must be odd and >= 3, got {self.cc_window}")
        if self.lambda_smooth < 0:
            raise ConfigError("lambda_smooth must be >= 0")
        if self.cc_mode not in ("local", "global"):
            raise ConfigError(f"unknown cc_mode {self.cc_mode!r}")


def _window_ops(mode, radius):
    """Window-sum operator and its adjoint over (N, D, H, W) float64 arrays."""
    if mode == "global":
        def total(a):
            return np.broadcast_to(a.sum(axis=(1, 2, 3), keepdims=True), a.shape)
        return total, total
    box = lambda a: _kernels.box_sum3d(a, radius)  # noqa: E731  symmetric window is self-adjoint
    return box, box


def ncc_loss(warped, tgt, window=9, eps=1e-5, mode="local"):
    """-mean of squared local cross-correlation between two (N, 1, D, H, W) tensors."""
    warped, tgt = as_tensor(warped), as_tensor(tgt)
    if warped.shape != tgt.shape or warped.shape[1] != 1:
        raise ValueError(f"ncc_loss: shapes {warped.shape} and {tgt.shape} must match with 1 channel")
    a = warped.data[:, 0].astype(np.float64)
    b = tgt.data[:, 0].astype(np.float64)
    win, win_t = _window_ops(mode, window // 2)
    # voxels per window; constant w.r.t. the inputs
    size = win(np.ones((1,) + a.shape[1:]))

    sa, sb = win(a), win(b)
    saa, sbb, sab = win(a * a), win(b * b), win(a * b)
    cross = sab - sa * sb / size
    va = saa - sa * sa / size
    vb = sbb - sb * sb / size
    denom = va * vb + eps
    cc = cross * cross / denom
    count = cc.size
    value = -cc.mean()

    def grad_fn(g):
        up = -float(g) / count
        d_cross = up * 2 * cross / denom
        d_va = -up * cross * cross * vb / (denom * denom)
        d_vb = -up * cross * cross * va / (denom * denom)
        # gradients w.r.t. the window sums
        g_sab = win_t(d_cross)
        g_sa = win_t(-d_cross * sb / size - 2 * d_va * sa / size)
        g_sb = win_t(-d_cross * sa / size - 2 * d_vb * sb / size)
        g_saa = win_t(d_va)
        g_sbb = win_t(d_vb)
        ga = g_sa + 2 * a * g_saa + b * g_sab
        gb = g_sb + 2 * b * g_sbb + a * g_sab
        return (ga[:, None].astype(warped.dtype), gb[:, None].astype(tgt.dtype))

    return record("ncc", (warped, tgt), np.asarray(value, dtype=warped.dtype), grad_fn)


def diffusion_reg(flow):
    """Mean over voxels and components of the squared forward-difference gradient norm."""
    flow = as_tensor(flow)
    f = flow.data.astype(np.float64)
    count = f.size
    total = 0.0
    diffs = []
    for axis in (2, 3, 4):
        d = np.diff(f, axis=axis)
        diffs.append(d)
        total += float(np.sum(d * d))
    value = total / count

    def grad_fn(g):
        gf = np.zeros_like(f)
        c = 2.0 * float(g) / count
        for axis, d in zip((2, 3, 4), diffs):
            lo = [slice(None)] * 5
            hi = [slice(None)] * 5
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            gf[tuple(hi)] += c * d
            gf[tuple(lo)] -= c * d
        return (gf.astype(flow.dtype),)

    return record("diffusion", (flow,), np.asarray(value, dtype=flow.dtype), grad_fn)


def loss_terms(src, tgt, flow, cfg: LossConfig):
    """(total, similarity, smoothness) tensors for one batch."""
    warped = warp_patch(src, flow)
    sim = ncc_loss(warped, tgt, cfg.cc_window, cfg.eps, cfg.cc_mode)
    smooth = diffusion_reg(flow)
    total = add(sim, scale(smooth, cfg.lambda_smooth))
    return total, sim, smooth


def total_loss(src, tgt, flow, cfg: LossConfig):
    return loss_terms(src, tgt, flow, cfg)[0]
