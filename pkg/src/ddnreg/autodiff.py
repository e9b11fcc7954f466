"""Minimal reverse-mode differentiable tensor engine.

Only the operations the dense deformation network needs are provided.
Tensors are plain numpy arrays in (N, C, D, H, W) layout with x (W)
fastest. Operations are recorded on the active :class:`Graph` (a tape
whose node list is topologically ordered by construction); with no graph
active nothing is recorded, which is the inference path.

Usage::

    g = Graph()
    with g:
        loss = some_ops(...)
    grads = backward(g, loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import NumericError

_state = threading.local()


class Tensor:
    """An array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable


@dataclass
class Graph:
    """Tape of recorded operations, in execution (= topological) order."""

    nodes: list = field(default_factory=list)
    check_finite: bool = True
    track_branches: bool = False
    branches: list = field(default_factory=list)

    def __enter__(self):
        stack = getattr(_state, "graphs", None)
        if stack is None:
            stack = _state.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.graphs.pop()
        return False


def active_graph():
    stack = getattr(_state, "graphs", None)
    return stack[-1] if stack else None


def note_branches(fn: Callable[[], np.ndarray]) -> None:
    """Record which piece of a piecewise op each element took (only when asked).

    ``fn`` is called lazily so the untracked path pays nothing.
    """
    graph = active_graph()
    if graph is not None and graph.track_branches:
        graph.branches.append(np.asarray(fn()).copy())


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as a Tensor and, if a graph is active, append a node.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    graph = active_graph()
    if graph is not None:
        if graph.check_finite and not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite values produced by {op}")
        if needs:
            graph.nodes.append(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(graph: Graph, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) for every leaf tensor that requires grad.

    Gradients are stored on ``leaf.grad`` and returned as a dict keyed by
    the leaf tensor.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    owners = {id(loss): loss}
    produced = set()
    for node in reversed(graph.nodes):
        produced.add(id(node.output))
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = inp
    leaves = {}
    for key, g in grads.items():
        if key in produced:
            continue
        t = owners[key]
        t.grad = g.reshape(t.shape).astype(t.dtype, copy=False)
        leaves[t] = t.grad
    return leaves


def _evaluate(loss_fn):
    graph = Graph(track_branches=True)
    with graph:
        value = loss_fn().item()
    return value, graph.branches


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps=1e-3,
               min_eps=1e-7, report=None) -> float:
    """Max relative error between backward's gradient and finite differences.

    ``loss_fn`` rebuilds the computation from the current parameter values;
    every coordinate of every tensor in ``params`` is probed with the
    fourth-order central stencil at +-eps, +-2 eps. If any probe lands on a
    different piece of a piecewise op (LeakyReLU sign, warp cell) than the
    unperturbed point, the step is shrunk tenfold, down to ``min_eps``;
    coordinates still straddling a kink there are skipped. Relative error is
    ``|a - b| / max(1e-8, |a| + |b|)``. ``report`` (a dict) receives the
    probe counts.
    """
    graph = Graph(track_branches=True)
    with graph:
        loss = loss_fn()
    base = graph.branches
    analytic = backward(graph, loss)
    worst = 0.0
    stats = {"coords": 0, "shrunk": 0, "skipped": 0}
    for p in params:
        ga = analytic.get(p)
        ga = np.zeros(p.shape) if ga is None else np.asarray(ga, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            stats["coords"] += 1
            orig = flat[i]
            h = eps
            num = None
            while h >= min_eps * (1 - 1e-9):
                vals = {}
                clean = True
                for k in (1, -1, 2, -2):
                    flat[i] = orig + k * h
                    vals[k], br = _evaluate(loss_fn)
                    if not _same_branches(br, base):
                        clean = False
                        break
                flat[i] = orig
                if clean:
                    num = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * h)
                    break
                h /= 10
            if num is None:
                stats["skipped"] += 1
                continue
            if h != eps:
                stats["shrunk"] += 1
            err = abs(num - gflat[i]) / max(1e-8, abs(num) + abs(gflat[i]))
            worst = max(worst, err)
    if report is not None:
        report.update(stats)
    return worst


# --------------------------------------------------------------------- workspace

def _workspace(tag, shape, dtype):
    """Per-thread scratch buffer, reused across calls with the same shape.

    Large column matrices would otherwise be mmap-allocated and page-faulted
    on every convolution.
    """
    cache = getattr(_state, "workspace", None)
    if cache is None:
        cache = _state.workspace = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = cache.get(key)
    if buf is None:
        if len(cache) > 64:
            cache.clear()
        buf = cache[key] = np.empty(shape, dtype=dtype)
    return buf


def clear_workspace():
    if hasattr(_state, "workspace"):
        _state.workspace.clear()


# --------------------------------------------------------------------- ops

def _conv_geometry(x_shape, w_shape, stride, padding):
    n, cin, d, h, w = x_shape
    cout, wcin, k, k2, k3 = w_shape
    if wcin != cin:
        raise ValueError(f"conv3d: input has {cin} channels, weights expect {wcin}")
    if not (k == k2 == k3):
        raise ValueError("conv3d: only cubic kernels are supported")
    if padding == "same":
        if k % 2 == 0:
            raise ValueError("conv3d: 'same' padding needs an odd kernel")
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"conv3d: unknown padding {padding!r}")
    out = tuple((s + 2 * pad - k) // stride + 1 for s in (d, h, w))
    if min(out) < 1:
        raise ValueError("conv3d: kernel larger than padded input")
    return k, pad, out


_SLAB_ROWS = 4096


def _weight_rows(w):
    """(Cout, Cin, k, k, k) -> (k^3 * Cin, Cout), rows ordered (kz, ky, kx, c)."""
    cout = w.shape[0]
    return np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0).reshape(-1, cout))


def _rows_conv(x, wrows, k, pad):
    """Stride-1 convolution of (N, C, D, H, W) via slab-wise unfolding and GEMM."""
    n, c, d, h, w = x.shape
    cout = wrows.shape[1]
    do, ho, wo = d + 2 * pad - k + 1, h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = np.empty((n, cout, do, ho, wo), dtype=x.dtype)
    plane = ho * wo
    zc = max(1, min(do, _SLAB_ROWS // plane))
    buf = _workspace("rows", (zc * plane, wrows.shape[0]), x.dtype)
    obuf = _workspace("orows", (zc * plane, cout), x.dtype)
    for i in range(n):
        xc = np.ascontiguousarray(x[i].transpose(1, 2, 3, 0))
        for z0 in range(0, do, zc):
            z1 = min(do, z0 + zc)
            m = (z1 - z0) * plane
            rows = _kernels.im2row3d(xc, k, pad, buf[:m], z0, z1)
            np.matmul(rows, wrows, out=obuf[:m])
            out[i, :, z0:z1] = obuf[:m].T.reshape(cout, z1 - z0, ho, wo)
    return out


def _rows_weight_grad(x, g, k, pad):
    """d(loss)/d(weights) for a stride-1 convolution, as (Cout, Cin, k, k, k)."""
    n, c, d, h, w = x.shape
    cout, do, ho, wo = g.shape[1:]
    plane = ho * wo
    zc = max(1, min(do, _SLAB_ROWS // plane))
    ksz = k * k * k * c
    buf = _workspace("rows", (zc * plane, ksz), x.dtype)
    gw = np.zeros((ksz, cout), dtype=x.dtype)
    for i in range(n):
        xc = np.ascontiguousarray(x[i].transpose(1, 2, 3, 0))
        gt = np.ascontiguousarray(g[i].reshape(cout, -1).T)
        for z0 in range(0, do, zc):
            z1 = min(do, z0 + zc)
            m = (z1 - z0) * plane
            rows = _kernels.im2row3d(xc, k, pad, buf[:m], z0, z1)
            gw += rows.T @ gt[z0 * plane:z0 * plane + m]
    return gw.reshape(k, k, k, c, cout).transpose(4, 3, 0, 1, 2)


def _cols(xn, k, stride, pad):
    c, d, h, w = xn.shape
    length = int(np.prod([(s + 2 * pad - k) // stride + 1 for s in (d, h, w)]))
    buf = _workspace("cols", (c * k ** 3, length), xn.dtype)
    return _kernels.im2col3d(np.ascontiguousarray(xn), k, stride, pad, buf)


def conv3d(x, w, b=None, stride=1, padding="same"):
    """3D cross-correlation of (N, Cin, D, H, W) with (Cout, Cin, k, k, k) weights.

    "same" zero-pads (k - 1) / 2 so the output extent is ceil(n / stride).
    """
    x, w = as_tensor(x), as_tensor(w)
    k, pad, (do, ho, wo) = _conv_geometry(x.shape, w.shape, stride, padding)
    n, cin = x.shape[:2]
    cout = w.shape[0]
    pointwise = k == 1 and stride == 1
    if pointwise:
        wm = w.data.reshape(cout, cin)
        out = np.matmul(wm, x.data.reshape(n, cin, -1)).reshape(n, cout, do, ho, wo)
    elif stride == 1:
        out = _rows_conv(x.data, _weight_rows(w.data), k, pad)
    else:
        wm = w.data.reshape(cout, -1)
        out = np.empty((n, cout, do, ho, wo), dtype=x.dtype)
        for i in range(n):
            np.matmul(wm, _cols(x.data[i], k, stride, pad), out=out[i].reshape(cout, -1))
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape(1, cout, 1, 1, 1)

    def grad_fn(g):
        g = np.ascontiguousarray(g, dtype=x.dtype)
        gx = gw = None
        if pointwise:
            gflat = g.reshape(n, cout, -1)
            if w.requires_grad:
                gw = np.einsum("nol,ncl->oc", gflat, x.data.reshape(n, cin, -1)).reshape(w.shape)
            if x.requires_grad:
                gx = np.matmul(wm.T, gflat).reshape(x.shape)
        elif stride == 1:
            if w.requires_grad:
                gw = _rows_weight_grad(x.data, g, k, pad)
            if x.requires_grad:
                # transposed convolution: flipped kernel, swapped channels
                flipped = w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
                gx = _rows_conv(g, _weight_rows(flipped), k, k - 1 - pad)
        else:
            gw = np.zeros((cout, cin * k ** 3), dtype=x.dtype) if w.requires_grad else None
            gx = np.empty_like(x.data) if x.requires_grad else None
            for i in range(n):
                gi = g[i].reshape(cout, -1)
                if gw is not None:
                    gw += gi @ _cols(x.data[i], k, stride, pad).T
                if gx is not None:
                    gx[i] = _kernels.col2im3d(np.ascontiguousarray(wm.T @ gi), x.shape[1:],
                                              k, stride, pad)
            if gw is not None:
                gw = gw.reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if b.requires_grad else None)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv3d", inputs, out, grad_fn)


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.9, eps=1e-5):
    """Per-channel batch normalisation over (N, D, H, W).

    In training mode the batch statistics are used and the running
    statistics (plain arrays or Tensors, updated in place) follow
    ``r <- momentum * r + (1 - momentum) * batch``; the batch variance is
    the biased one. In inference mode the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    rm = running_mean.data if isinstance(running_mean, Tensor) else running_mean
    rv = running_var.data if isinstance(running_var, Tensor) else running_var
    c = x.shape[1]
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    if training:
        mean = x.data.mean(axis=axes, dtype=np.float64)
        centered = x.data - mean.astype(x.dtype).reshape(bshape)
        var = np.mean(np.square(centered), axis=axes, dtype=np.float64)
        rm *= momentum
        rm += (1 - momentum) * mean.astype(rm.dtype)
        rv *= momentum
        rv += (1 - momentum) * var.astype(rv.dtype)
    else:
        centered = x.data - rm.astype(x.dtype).reshape(bshape)
        var = rv.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = centered * inv_std
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.data.size // c

    def grad_fn(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = inv_std * (gxhat - gxhat.sum(axis=axes).reshape(bshape) / m
                            - xhat * ((gxhat * xhat).sum(axis=axes).reshape(bshape) / m))
        else:
            gx = gxhat * inv_std
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return record("batch_norm", (x, gamma, beta), out, grad_fn)


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    pos = x.data >= 0
    note_branches(lambda: pos)
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def grad_fn(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return record("leaky_relu", (x,), out, grad_fn)


def concat_channels(xs):
    xs = [as_tensor(t) for t in xs]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def grad_fn(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return record("concat", xs, out, grad_fn)


def avg_pool3d(x, kernel=2):
    """Non-overlapping k^3 average pooling; trailing planes that do not fill a window are dropped."""
    x = as_tensor(x)
    n, c, d, h, w = x.shape
    k = kernel
    d2, h2, w2 = d // k, h // k, w // k
    crop = x.data[:, :, :d2 * k, :h2 * k, :w2 * k]
    out = crop.reshape(n, c, d2, k, h2, k, w2, k).mean(axis=(3, 5, 7))

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        share = (g / (k ** 3)).astype(x.dtype, copy=False)
        gx[:, :, :d2 * k, :h2 * k, :w2 * k] = (
            np.broadcast_to(share[:, :, :, None, :, None, :, None], (n, c, d2, k, h2, k, w2, k))
            .reshape(n, c, d2 * k, h2 * k, w2 * k))
        return (gx,)

    return record("avg_pool3d", (x,), out.astype(x.dtype, copy=False), grad_fn)


_interp_cache = {}


def interp_matrix(n, factor, dtype):
    """Align-corners linear interpolation matrix mapping n samples to n*factor."""
    key = (n, factor, np.dtype(dtype).str)
    mat = _interp_cache.get(key)
    if mat is None:
        m = n * factor
        mat = np.zeros((m, n))
        if n == 1:
            mat[:, 0] = 1.0
        else:
            pos = np.arange(m) * (n - 1) / (m - 1)
            i0 = np.minimum(np.floor(pos).astype(int), n - 2)
            frac = pos - i0
            mat[np.arange(m), i0] = 1 - frac
            mat[np.arange(m), i0 + 1] += frac
        mat = mat.astype(dtype)
        mat.setflags(write=False)
        _interp_cache[key] = mat
    return mat


def upsample_trilinear(x, factor=2):
    """Align-corners trilinear upsampling to (factor*D, factor*H, factor*W)."""
    x = as_tensor(x)
    n, c, d, h, w = x.shape
    md = interp_matrix(d, factor, x.dtype)
    mh = interp_matrix(h, factor, x.dtype)
    mw = interp_matrix(w, factor, x.dtype)
    t = x.data @ mw.T
    t = mh @ t
    t = (md @ t.reshape(n, c, d, -1)).reshape(n, c, d * factor, h * factor, w * factor)

    def grad_fn(g):
        u = g.reshape(n, c, d * factor, -1)
        u = (md.T @ u).reshape(n, c, d, h * factor, w * factor)
        u = mh.T @ u
        return (u @ mw,)

    return record("upsample", (x,), t, grad_fn)


def scale(x, factor):
    x = as_tensor(x)
    f = x.dtype.type(factor)
    return record("scale", (x,), x.data * f, lambda g: (g * f,))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(x, weights):
    """Elementwise product with a constant array (no gradient to ``weights``)."""
    x = as_tensor(x)
    wd = np.asarray(weights, dtype=x.dtype)
    return record("mul", (x,), x.data * wd, lambda g: (g * wd,))


def sum_all(x):
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return record("sum", (x,), out,
                  lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))
