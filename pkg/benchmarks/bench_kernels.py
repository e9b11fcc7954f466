"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--size S]

Each kernel runs on identical inputs in both backends; the script checks
that the outputs agree before reporting the best-of-N wall time.
"""
import argparse
import time

import numpy as np

from ddnreg._kernels import cython_backend, numpy_backend


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size, rng):
    s = size
    vol = rng.random((8, s, s, s)).astype(np.float32)
    chlast = np.ascontiguousarray(vol.transpose(1, 2, 3, 0))
    src = rng.random((2, s, s, s)).astype(np.float32)
    flow = rng.uniform(-2, 2, (2, 3, s, s, s)).astype(np.float32)
    gout = rng.random((2, s, s, s)).astype(np.float32)
    cols = rng.random((8 * 27, s ** 3)).astype(np.float32)
    mag = rng.random((s, s, s))
    gx, gy, gz = rng.standard_normal((3, s, s, s))
    return [
        ("im2col3d 8ch k3", lambda b: b.im2col3d(vol, 3, 1, 1)),
        ("im2row3d 8ch k3", lambda b: b.im2row3d(chlast, 3, 1)),
        ("col2im3d 8ch k3", lambda b: b.col2im3d(cols, vol.shape, 3, 1, 1)),
        ("warp_forward", lambda b: b.warp_forward(src, flow)),
        ("warp_backward", lambda b: b.warp_backward(src, flow, gout)),
        ("box_sum3d r4", lambda b: b.box_sum3d(src, 4)),
        ("nms3d", lambda b: b.nms3d(mag, gx, gy, gz)),
    ]


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=32, help="cube side of the test volumes")
    args = ap.parse_args(argv)
    if cython_backend is None:
        print("compiled kernels are not built; only the numpy fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in cases(args.size, rng):
        a, b = fn(numpy_backend), fn(cython_backend)
        if not np.allclose(_flat(a), _flat(b), atol=1e-4):
            raise SystemExit(f"{name}: backends disagree")
        tn = best_time(lambda: fn(numpy_backend), args.repeat)
        tc = best_time(lambda: fn(cython_backend), args.repeat)
        print(f"{name:<18} {1e3 * tn:>10.2f} {1e3 * tc:>10.2f} {tn / tc:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
