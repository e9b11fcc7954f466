"""Hot kernels: compiled Cython module with a numpy fallback.

The compiled module is used when it imports; set ``DDN_KERNELS=numpy`` to
force the fallback. Both backends are importable directly for comparison.
"""
import os

from . import _pykernels as numpy_backend

try:
    from . import _ckernels as cython_backend
except ImportError:  # extension not built
    cython_backend = None

if cython_backend is not None and os.environ.get("DDN_KERNELS", "").lower() != "numpy":
    _impl = cython_backend
    BACKEND = "cython"
else:
    _impl = numpy_backend
    BACKEND = "numpy"

im2col3d = _impl.im2col3d
im2row3d = _impl.im2row3d
col2im3d = _impl.col2im3d
warp_forward = _impl.warp_forward
warp_backward = _impl.warp_backward
box_sum3d = _impl.box_sum3d
nms3d = _impl.nms3d

__all__ = ["BACKEND", "numpy_backend", "cython_backend", "im2col3d", "im2row3d", "col2im3d",
           "warp_forward", "warp_backward", "box_sum3d", "nms3d"]
