"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Array layout is (z, y, x) with x fastest; flow channel 0 is the x
displacement, 1 is y, 2 is z.
"""
import numpy as np


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col3d(x, k, stride=1, pad=0, out_arr=None):
    """Unfold a (C, D, H, W) volume into a (C*k^3, Do*Ho*Wo) column matrix."""
    c, d, h, w = x.shape
    do, ho, wo = (_out_extent(n, k, stride, pad) for n in (d, h, w))
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    if out_arr is None:
        out_arr = np.empty((c * k * k * k, do * ho * wo), dtype=x.dtype)
    cols = out_arr.reshape(c, k * k * k, do, ho, wo)
    idx = 0
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                cols[:, idx] = x[:, kz:kz + stride * do:stride,
                                 ky:ky + stride * ho:stride,
                                 kx:kx + stride * wo:stride]
                idx += 1
    return out_arr


def im2row3d(x, k, pad=0, out_arr=None, z_start=0, z_stop=-1):
    """Stride-1 unfold of a channels-last (D, H, W, C) volume.

    One row per output voxel of planes [z_start, z_stop), columns ordered
    (kz, ky, kx, c).
    """
    d, h, w, c = x.shape
    do, ho, wo = (n + 2 * pad - k + 1 for n in (d, h, w))
    if z_stop < 0 or z_stop > do:
        z_stop = do
    zc = z_stop - z_start
    if out_arr is None:
        out_arr = np.empty((zc * ho * wo, k * k * k * c), dtype=x.dtype)
    lo = z_start - pad
    hi = z_stop - 1 - pad + k
    sub = np.zeros((hi - lo, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    s0, s1 = max(lo, 0), min(hi, d)
    if s1 > s0:
        sub[s0 - lo:s1 - lo, pad:pad + h, pad:pad + w] = x[s0:s1]
    rows = out_arr.reshape(zc, ho, wo, k, k, k, c)
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                rows[:, :, :, kz, ky, kx] = sub[kz:kz + zc, ky:ky + ho, kx:kx + wo]
    return out_arr


def col2im3d(cols, shape, k, stride=1, pad=0):
    """Adjoint of :func:`im2col3d`: scatter-add columns back into a volume."""
    c, d, h, w = shape
    do, ho, wo = (_out_extent(n, k, stride, pad) for n in (d, h, w))
    cols = cols.reshape(c, k * k * k, do, ho, wo)
    xp = np.zeros((c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    idx = 0
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                xp[:, kz:kz + stride * do:stride,
                   ky:ky + stride * ho:stride,
                   kx:kx + stride * wo:stride] += cols[:, idx]
                idx += 1
    return np.ascontiguousarray(xp[:, pad:pad + d, pad:pad + h, pad:pad + w])


def _axis_coords(base, disp, n):
    """Clamped cell index pair, fraction and in-range mask along one axis."""
    c = base + disp
    inside = (c >= 0) & (c <= n - 1)
    cc = np.clip(c, 0, n - 1)
    if n == 1:
        i0 = np.zeros(cc.shape, dtype=np.intp)
        return i0, i0, cc - i0, inside
    i0 = np.minimum(np.floor(cc).astype(np.intp), n - 2)
    return i0, i0 + 1, cc - i0, inside


def _warp_setup(flow):
    n, _, d, h, w = flow.shape
    dtype = flow.dtype
    z = np.arange(d, dtype=dtype)[:, None, None]
    y = np.arange(h, dtype=dtype)[None, :, None]
    x = np.arange(w, dtype=dtype)[None, None, :]
    ax = _axis_coords(x, flow[:, 0], w)
    ay = _axis_coords(y, flow[:, 1], h)
    az = _axis_coords(z, flow[:, 2], d)
    return ax, ay, az


def _corners(src, ax, ay, az):
    n, d, h, w = src.shape
    flat = src.reshape(n, -1)
    rows = np.arange(n)[:, None]
    vals = {}
    for a, zi in enumerate((az[0], az[1])):
        for b, yi in enumerate((ay[0], ay[1])):
            for c, xi in enumerate((ax[0], ax[1])):
                lin = ((zi * h + yi) * w + xi).reshape(n, -1)
                vals[a, b, c] = flat[rows, lin].reshape(zi.shape)
    return vals


def warp_forward(src, flow):
    """Backward (pull) trilinear warp: out(p) = src(p + flow(p)), border clamped."""
    ax, ay, az = _warp_setup(flow)
    v = _corners(src, ax, ay, az)
    fx, fy, fz = ax[2], ay[2], az[2]
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    c00 = v[0, 0, 0] * gx + v[0, 0, 1] * fx
    c01 = v[0, 1, 0] * gx + v[0, 1, 1] * fx
    c10 = v[1, 0, 0] * gx + v[1, 0, 1] * fx
    c11 = v[1, 1, 0] * gx + v[1, 1, 1] * fx
    c0 = c00 * gy + c01 * fy
    c1 = c10 * gy + c11 * fy
    return (c0 * gz + c1 * fz).astype(src.dtype, copy=False)


def warp_backward(src, flow, gout):
    """Gradients of :func:`warp_forward` w.r.t. ``src`` and ``flow``."""
    n, d, h, w = src.shape
    ax, ay, az = _warp_setup(flow)
    v = _corners(src, ax, ay, az)
    fx, fy, fz = ax[2], ay[2], az[2]
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz

    gflow = np.empty(flow.shape, dtype=flow.dtype)
    # d/dfx
    dx = ((v[0, 0, 1] - v[0, 0, 0]) * gy + (v[0, 1, 1] - v[0, 1, 0]) * fy) * gz \
        + ((v[1, 0, 1] - v[1, 0, 0]) * gy + (v[1, 1, 1] - v[1, 1, 0]) * fy) * fz
    dy = ((v[0, 1, 0] - v[0, 0, 0]) * gx + (v[0, 1, 1] - v[0, 0, 1]) * fx) * gz \
        + ((v[1, 1, 0] - v[1, 0, 0]) * gx + (v[1, 1, 1] - v[1, 0, 1]) * fx) * fz
    dz = ((v[1, 0, 0] - v[0, 0, 0]) * gx + (v[1, 0, 1] - v[0, 0, 1]) * fx) * gy \
        + ((v[1, 1, 0] - v[0, 1, 0]) * gx + (v[1, 1, 1] - v[0, 1, 1]) * fx) * fy
    gflow[:, 0] = gout * dx * ax[3]
    gflow[:, 1] = gout * dy * ay[3]
    gflow[:, 2] = gout * dz * az[3]

    gsrc = np.zeros(n * d * h * w, dtype=np.float64)
    offs = (np.arange(n) * (d * h * w))[:, None, None, None]
    for a, (zi, wz) in enumerate(((az[0], gz), (az[1], fz))):
        for b, (yi, wy) in enumerate(((ay[0], gy), (ay[1], fy))):
            for c, (xi, wx) in enumerate(((ax[0], gx), (ax[1], fx))):
                lin = (zi * h + yi) * w + xi + offs
                gsrc += np.bincount(lin.ravel(), weights=(gout * wz * wy * wx).ravel(),
                                    minlength=gsrc.size)
    return gsrc.reshape(src.shape).astype(src.dtype), gflow


def box_sum3d(x, radius):
    """Zero-padded sum over a (2r+1)^3 window centred on every voxel of (N, D, H, W)."""
    out = np.asarray(x, dtype=np.float64)
    width = 2 * radius + 1
    for axis in (1, 2, 3):
        pad = [(0, 0)] * 4
        pad[axis] = (radius + 1, radius)
        cs = np.cumsum(np.pad(out, pad), axis=axis)
        n = out.shape[axis]
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(width, width + n)
        lo[axis] = slice(0, n)
        out = cs[tuple(hi)] - cs[tuple(lo)]
    return out


def _nms_directions():
    dirs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                v = (dx, dy, dz)
                first = next((c for c in (dz, dy, dx) if c != 0), 0)
                if first > 0:
                    dirs.append(v)
    return dirs


NMS_DIRECTIONS = _nms_directions()


def nms3d(mag, gx, gy, gz):
    """Non-maximum suppression along the gradient direction quantised to 26 neighbours.

    A voxel survives when its magnitude is positive, >= the neighbour ahead
    along the gradient and > the neighbour behind it (one-voxel-thick ridges
    on symmetric profiles).
    """
    d, h, w = mag.shape
    mag = np.asarray(mag, dtype=np.float64)
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    gz = np.asarray(gz, dtype=np.float64)
    norm = np.sqrt(gx * gx + gy * gy + gz * gz)
    best = np.zeros(mag.shape, dtype=np.intp)
    best_score = np.full(mag.shape, -1.0)
    best_dot = np.zeros(mag.shape)
    for k, (dx, dy, dz) in enumerate(NMS_DIRECTIONS):
        s = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz)
        dot = (gx * (dx * s) + gy * (dy * s)) + gz * (dz * s)
        score = np.abs(dot)
        upd = score > best_score
        best[upd] = k
        best_score[upd] = score[upd]
        best_dot[upd] = dot[upd]
    padded = np.pad(mag, 1)
    keep = np.zeros(mag.shape, dtype=bool)
    for k, (dx, dy, dz) in enumerate(NMS_DIRECTIONS):
        sel = best == k
        if not sel.any():
            continue
        plus = padded[1 + dz:1 + dz + d, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        minus = padded[1 - dz:1 - dz + d, 1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        fwd = best_dot >= 0
        ahead = np.where(fwd, plus, minus)
        behind = np.where(fwd, minus, plus)
        keep |= sel & (mag >= ahead) & (mag > behind)
    keep &= (mag > 0) & (norm > 0)
    return np.where(keep, mag, 0.0)
