"""Spatial-transformer warping of patches (differentiable) and whole volumes."""
import numpy as np

from . import _kernels
from .autodiff import as_tensor, note_branches, record
from .volume import DisplacementField, Volume3


def warp_patch(src, flow):
    """Pull-warp a 1-channel (N, 1, D, H, W) tensor by a (N, 3, D, H, W) flow.

    ``out(p) = src(p + flow(p))`` with trilinear interpolation and border
    clamping; differentiable in both arguments.
    """
    src, flow = as_tensor(src), as_tensor(flow)
    n, c = src.shape[:2]
    if c != 1 or flow.shape != (n, 3) + src.shape[2:]:
        raise ValueError(f"warp_patch: src {src.shape} and flow {flow.shape} do not agree")
    if flow.dtype != src.dtype:
        raise ValueError("warp_patch: src and flow dtypes differ")
    s = np.ascontiguousarray(src.data[:, 0])
    f = np.ascontiguousarray(flow.data)
    out = _kernels.warp_forward(s, f)[:, None]
    note_branches(lambda: _cells(f))

    def grad_fn(g):
        gsrc, gflow = _kernels.warp_backward(s, f, np.ascontiguousarray(g[:, 0]))
        return gsrc[:, None], gflow

    return record("warp", (src, flow), out, grad_fn)


def _cells(flow):
    """Interpolation cell and clamp state of every sample point (kink signature)."""
    sig = []
    for axis, comp in ((4, 0), (3, 1), (2, 2)):
        n = flow.shape[axis]
        shape = [1] * 4
        shape[axis - 1] = n
        c = np.arange(n).reshape(shape) + flow[:, comp]
        sig.append(np.floor(c).astype(np.int64))
        sig.append(c < 0)
        sig.append(c > n - 1)
    return np.stack(sig)


def warp_volume(vol: Volume3, field: DisplacementField) -> Volume3:
    """Non-differentiable pull warp of a whole volume."""
    if vol.dims != field.dims:
        raise ValueError(f"volume dims {vol.dims} and field dims {field.dims} differ")
    out = _kernels.warp_forward(vol.data[None].astype(np.float32),
                                field.data[None].astype(np.float32))
    return Volume3(out[0], vol.spacing)
