# cython: language_level=3
"""Compiled versions of the kernels in ``_pykernels``.

Same signatures and semantics; loops release the GIL so concurrent tile
inference can overlap them.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor, sqrt, fabs
from libc.string cimport memcpy, memset

cnp.import_array()


cdef inline Py_ssize_t _extent(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) noexcept nogil:
    return (n + 2 * p - k) // s + 1


def im2col3d(const floating[:, :, :, ::1] x, int k, int stride=1, int pad=0, out_arr=None):
    cdef Py_ssize_t C = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Do = _extent(D, k, stride, pad)
    cdef Py_ssize_t Ho = _extent(H, k, stride, pad)
    cdef Py_ssize_t Wo = _extent(W, k, stride, pad)
    dtype = np.float32 if floating is float else np.float64
    if out_arr is None:
        out_arr = np.empty((C * k * k * k, Do * Ho * Wo), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t c, kz, ky, kx, oz, oy, ox, iz, iy, row, col, lo, hi
    with nogil:
        for c in range(C):
            for kz in range(k):
                for ky in range(k):
                    for kx in range(k):
                        row = ((c * k + kz) * k + ky) * k + kx
                        # output columns whose input x falls inside [0, W)
                        lo = 0
                        while lo < Wo and lo * stride - pad + kx < 0:
                            lo += 1
                        hi = Wo
                        while hi > lo and (hi - 1) * stride - pad + kx >= W:
                            hi -= 1
                        col = 0
                        for oz in range(Do):
                            iz = oz * stride - pad + kz
                            for oy in range(Ho):
                                iy = oy * stride - pad + ky
                                if iz < 0 or iz >= D or iy < 0 or iy >= H:
                                    for ox in range(Wo):
                                        out[row, col + ox] = 0
                                else:
                                    for ox in range(lo):
                                        out[row, col + ox] = 0
                                    for ox in range(lo, hi):
                                        out[row, col + ox] = x[c, iz, iy, ox * stride - pad + kx]
                                    for ox in range(hi, Wo):
                                        out[row, col + ox] = 0
                                col += Wo
    return out_arr


def im2row3d(const floating[:, :, :, ::1] x, int k, int pad=0, out_arr=None,
             Py_ssize_t z_start=0, Py_ssize_t z_stop=-1):
    """Stride-1 unfold of a channels-last (D, H, W, C) volume.

    One row per output voxel of planes [z_start, z_stop), columns ordered
    (kz, ky, kx, c).
    """
    cdef Py_ssize_t D = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Do = D + 2 * pad - k + 1
    cdef Py_ssize_t Ho = H + 2 * pad - k + 1
    cdef Py_ssize_t Wo = W + 2 * pad - k + 1
    if z_stop < 0 or z_stop > Do:
        z_stop = Do
    dtype = np.float32 if floating is float else np.float64
    if out_arr is None:
        out_arr = np.empty(((z_stop - z_start) * Ho * Wo, k * k * k * C), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t oz, oy, ox, kz, ky, j, iz, iy, ix0, row, col
    cdef size_t sz = sizeof(floating)
    cdef floating* dst
    with nogil:
        row = 0
        for oz in range(z_start, z_stop):
            for oy in range(Ho):
                for ox in range(Wo):
                    dst = &out[row, 0]
                    col = 0
                    ix0 = ox - pad
                    for kz in range(k):
                        iz = oz - pad + kz
                        for ky in range(k):
                            iy = oy - pad + ky
                            if iz < 0 or iz >= D or iy < 0 or iy >= H:
                                memset(dst + col, 0, k * C * sz)
                            elif ix0 >= 0 and ix0 + k <= W:
                                memcpy(dst + col, &x[iz, iy, ix0, 0], k * C * sz)
                            else:
                                for j in range(k):
                                    if ix0 + j < 0 or ix0 + j >= W:
                                        memset(dst + col + j * C, 0, C * sz)
                                    else:
                                        memcpy(dst + col + j * C, &x[iz, iy, ix0 + j, 0], C * sz)
                            col += k * C
                    row += 1
    return out_arr


def col2im3d(const floating[:, ::1] cols, shape, int k, int stride=1, int pad=0):
    cdef Py_ssize_t C = shape[0], D = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Do = _extent(D, k, stride, pad)
    cdef Py_ssize_t Ho = _extent(H, k, stride, pad)
    cdef Py_ssize_t Wo = _extent(W, k, stride, pad)
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((C, D, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c, kz, ky, kx, oz, oy, ox, iz, iy, ix, row, col
    with nogil:
        for c in range(C):
            for kz in range(k):
                for ky in range(k):
                    for kx in range(k):
                        row = ((c * k + kz) * k + ky) * k + kx
                        col = 0
                        for oz in range(Do):
                            iz = oz * stride - pad + kz
                            for oy in range(Ho):
                                iy = oy * stride - pad + ky
                                if iz >= 0 and iz < D and iy >= 0 and iy < H:
                                    for ox in range(Wo):
                                        ix = ox * stride - pad + kx
                                        if ix >= 0 and ix < W:
                                            out[c, iz, iy, ix] += cols[row, col + ox]
                                col += Wo
    return out_arr


cdef inline void _axis(floating base, floating disp, Py_ssize_t n,
                       Py_ssize_t* i0, Py_ssize_t* i1, floating* f, floating* inside) noexcept nogil:
    cdef floating c = base + disp
    cdef floating cc = c
    inside[0] = 1
    if c < 0:
        cc = 0
        inside[0] = 0
    elif c > n - 1:
        cc = n - 1
        inside[0] = 0
    if n == 1:
        i0[0] = 0
        i1[0] = 0
        f[0] = cc
        return
    i0[0] = <Py_ssize_t>floor(cc)
    if i0[0] > n - 2:
        i0[0] = n - 2
    i1[0] = i0[0] + 1
    f[0] = cc - i0[0]


def warp_forward(const floating[:, :, :, ::1] src, const floating[:, :, :, :, ::1] flow):
    cdef Py_ssize_t N = src.shape[0], D = src.shape[1], H = src.shape[2], W = src.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((N, D, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, z, y, x, x0, x1, y0, y1, z0, z1
    cdef floating fx, fy, fz, gx, gy, gz, ix, iy, iz, c00, c01, c10, c11, c0, c1
    with nogil:
        for n in range(N):
            for z in range(D):
                for y in range(H):
                    for x in range(W):
                        _axis(<floating>x, flow[n, 0, z, y, x], W, &x0, &x1, &fx, &ix)
                        _axis(<floating>y, flow[n, 1, z, y, x], H, &y0, &y1, &fy, &iy)
                        _axis(<floating>z, flow[n, 2, z, y, x], D, &z0, &z1, &fz, &iz)
                        gx = 1 - fx
                        gy = 1 - fy
                        gz = 1 - fz
                        c00 = src[n, z0, y0, x0] * gx + src[n, z0, y0, x1] * fx
                        c01 = src[n, z0, y1, x0] * gx + src[n, z0, y1, x1] * fx
                        c10 = src[n, z1, y0, x0] * gx + src[n, z1, y0, x1] * fx
                        c11 = src[n, z1, y1, x0] * gx + src[n, z1, y1, x1] * fx
                        c0 = c00 * gy + c01 * fy
                        c1 = c10 * gy + c11 * fy
                        out[n, z, y, x] = c0 * gz + c1 * fz
    return out_arr


def warp_backward(const floating[:, :, :, ::1] src, const floating[:, :, :, :, ::1] flow,
                  const floating[:, :, :, ::1] gout):
    cdef Py_ssize_t N = src.shape[0], D = src.shape[1], H = src.shape[2], W = src.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gsrc_arr = np.zeros((N, D, H, W), dtype=dtype)
    gflow_arr = np.empty((N, 3, D, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] gsrc = gsrc_arr
    cdef floating[:, :, :, :, ::1] gflow = gflow_arr
    cdef Py_ssize_t n, z, y, x, x0, x1, y0, y1, z0, z1
    cdef floating fx, fy, fz, gx, gy, gz, ix, iy, iz, g
    cdef floating v000, v001, v010, v011, v100, v101, v110, v111
    with nogil:
        for n in range(N):
            for z in range(D):
                for y in range(H):
                    for x in range(W):
                        _axis(<floating>x, flow[n, 0, z, y, x], W, &x0, &x1, &fx, &ix)
                        _axis(<floating>y, flow[n, 1, z, y, x], H, &y0, &y1, &fy, &iy)
                        _axis(<floating>z, flow[n, 2, z, y, x], D, &z0, &z1, &fz, &iz)
                        gx = 1 - fx
                        gy = 1 - fy
                        gz = 1 - fz
                        g = gout[n, z, y, x]
                        v000 = src[n, z0, y0, x0]
                        v001 = src[n, z0, y0, x1]
                        v010 = src[n, z0, y1, x0]
                        v011 = src[n, z0, y1, x1]
                        v100 = src[n, z1, y0, x0]
                        v101 = src[n, z1, y0, x1]
                        v110 = src[n, z1, y1, x0]
                        v111 = src[n, z1, y1, x1]
                        gflow[n, 0, z, y, x] = g * ix * (
                            ((v001 - v000) * gy + (v011 - v010) * fy) * gz
                            + ((v101 - v100) * gy + (v111 - v110) * fy) * fz)
                        gflow[n, 1, z, y, x] = g * iy * (
                            ((v010 - v000) * gx + (v011 - v001) * fx) * gz
                            + ((v110 - v100) * gx + (v111 - v101) * fx) * fz)
                        gflow[n, 2, z, y, x] = g * iz * (
                            ((v100 - v000) * gx + (v101 - v001) * fx) * gy
                            + ((v110 - v010) * gx + (v111 - v011) * fx) * fy)
                        gsrc[n, z0, y0, x0] += g * gz * gy * gx
                        gsrc[n, z0, y0, x1] += g * gz * gy * fx
                        gsrc[n, z0, y1, x0] += g * gz * fy * gx
                        gsrc[n, z0, y1, x1] += g * gz * fy * fx
                        gsrc[n, z1, y0, x0] += g * fz * gy * gx
                        gsrc[n, z1, y0, x1] += g * fz * gy * fx
                        gsrc[n, z1, y1, x0] += g * fz * fy * gx
                        gsrc[n, z1, y1, x1] += g * fz * fy * fx
    return gsrc_arr, gflow_arr


cdef void _line_sum(double* a, double* b, Py_ssize_t stride, Py_ssize_t L,
                    Py_ssize_t r) noexcept nogil:
    # b[l] = sum of a[l - r .. l + r] along one strided line, zero outside
    cdef Py_ssize_t l
    cdef double s = 0
    for l in range(r if r < L else L):
        s += a[l * stride]
    for l in range(L):
        if l + r < L:
            s += a[(l + r) * stride]
        b[l * stride] = s
        if l - r >= 0:
            s -= a[(l - r) * stride]


cdef void _running_sum(double[:, :, :, ::1] a, double[:, :, :, ::1] b,
                       int axis, Py_ssize_t r) noexcept nogil:
    cdef Py_ssize_t N = a.shape[0], D = a.shape[1], H = a.shape[2], W = a.shape[3]
    cdef Py_ssize_t n, i, j
    for n in range(N):
        if axis == 3:
            for i in range(D):
                for j in range(H):
                    _line_sum(&a[n, i, j, 0], &b[n, i, j, 0], 1, W, r)
        elif axis == 2:
            for i in range(D):
                for j in range(W):
                    _line_sum(&a[n, i, 0, j], &b[n, i, 0, j], W, H, r)
        else:
            for i in range(H):
                for j in range(W):
                    _line_sum(&a[n, 0, i, j], &b[n, 0, i, j], H * W, D, r)


def box_sum3d(x, int radius):
    cdef double[:, :, :, ::1] a = np.ascontiguousarray(x, dtype=np.float64)
    tmp_arr = np.empty(np.shape(x), dtype=np.float64)
    out_arr = np.empty(np.shape(x), dtype=np.float64)
    cdef double[:, :, :, ::1] tmp = tmp_arr
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        _running_sum(a, out, 3, radius)
        _running_sum(out, tmp, 2, radius)
        _running_sum(tmp, out, 1, radius)
    return out_arr


def nms3d(mag_in, gx_in, gy_in, gz_in):
    from ._pykernels import NMS_DIRECTIONS
    cdef double[:, :, ::1] mag = np.ascontiguousarray(mag_in, dtype=np.float64)
    cdef double[:, :, ::1] gx = np.ascontiguousarray(gx_in, dtype=np.float64)
    cdef double[:, :, ::1] gy = np.ascontiguousarray(gy_in, dtype=np.float64)
    cdef double[:, :, ::1] gz = np.ascontiguousarray(gz_in, dtype=np.float64)
    dirs_arr = np.asarray(NMS_DIRECTIONS, dtype=np.intp)
    cdef Py_ssize_t[:, ::1] dirs = dirs_arr
    cdef Py_ssize_t ndir = dirs_arr.shape[0]
    cdef Py_ssize_t D = mag.shape[0], H = mag.shape[1], W = mag.shape[2]
    out_arr = np.zeros((D, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] inv = np.array(
        [1.0 / np.sqrt(dx * dx + dy * dy + dz * dz) for dx, dy, dz in NMS_DIRECTIONS])
    cdef Py_ssize_t z, y, x, k, best, dx, dy, dz, pz, py, px
    cdef double m, s, dot, score, best_score, best_dot, ahead, behind, a, b
    with nogil:
        for z in range(D):
            for y in range(H):
                for x in range(W):
                    m = mag[z, y, x]
                    if m <= 0:
                        continue
                    if gx[z, y, x] == 0 and gy[z, y, x] == 0 and gz[z, y, x] == 0:
                        continue
                    best = 0
                    best_score = -1.0
                    best_dot = 0.0
                    for k in range(ndir):
                        s = inv[k]
                        dot = (gx[z, y, x] * (dirs[k, 0] * s) + gy[z, y, x] * (dirs[k, 1] * s)) \
                            + gz[z, y, x] * (dirs[k, 2] * s)
                        score = fabs(dot)
                        if score > best_score:
                            best = k
                            best_score = score
                            best_dot = dot
                    dx = dirs[best, 0]
                    dy = dirs[best, 1]
                    dz = dirs[best, 2]
                    pz = z + dz
                    py = y + dy
                    px = x + dx
                    a = 0.0
                    if 0 <= pz < D and 0 <= py < H and 0 <= px < W:
                        a = mag[pz, py, px]
                    pz = z - dz
                    py = y - dy
                    px = x - dx
                    b = 0.0
                    if 0 <= pz < D and 0 <= py < H and 0 <= px < W:
                        b = mag[pz, py, px]
                    if best_dot >= 0:
                        ahead = a
                        behind = b
                    else:
                        ahead = b
                        behind = a
                    if m >= ahead and m > behind:
                        out[z, y, x] = m
    return out_arr
