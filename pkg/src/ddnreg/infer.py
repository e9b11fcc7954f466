"""Whole-volume registration by overlapping tiles and weighted flow stitching."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .model import DdnModel, predict_flow
from .volume import DisplacementField, Volume3
from .warp import warp_volume

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-3


@dataclass(frozen=True)
class TilePlan:
    dims: tuple          # (dx, dy, dz)
    patch_size: int
    stride: int
    origins: tuple       # ((ox, oy, oz), ...), z-major order

    def __len__(self):
        return len(self.origins)


def _axis_starts(n, p, stride):
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def tile_volume(dims, p: int, overlap: float = 0.5) -> TilePlan:
    """Tile origins at multiples of the stride, border tiles pulled inward."""
    if not 0.0 <= overlap <= 0.9:
        raise ValueError(f"overlap must be in [0, 0.9], got {overlap}")
    dims = tuple(int(d) for d in dims)
    if any(p > d for d in dims):
        raise ValueError(f"patch size {p} exceeds volume dims {dims}")
    stride = max(1, int(np.floor(p * (1.0 - overlap) + 1e-9)))
    xs, ys, zs = (_axis_starts(d, p, stride) for d in dims)
    origins = tuple((x, y, z) for z, y, x in itertools.product(zs, ys, xs))
    return TilePlan(dims, p, stride, origins)


def blend_weights(p: int) -> np.ndarray:
    """Separable tent window of side p, each axis floored at 1e-3."""
    if p == 1:
        return np.ones((1, 1, 1))
    i = np.arange(p, dtype=np.float64)
    # 1 - |2i/(p-1) - 1| written so that mirrored indices give identical bits
    w = np.maximum(2.0 * np.minimum(i, p - 1 - i) / (p - 1), WEIGHT_FLOOR)
    return w[:, None, None] * w[None, :, None] * w[None, None, :]


def stitch(plan: TilePlan, flows) -> np.ndarray:
    """Weighted average of per-tile (3, p, p, p) flows, consumed in plan order."""
    dx, dy, dz = plan.dims
    p = plan.patch_size
    acc = np.zeros((3, dz, dy, dx), dtype=np.float64)
    wsum = np.zeros((dz, dy, dx), dtype=np.float64)
    w = blend_weights(p)
    for (ox, oy, oz), flow in zip(plan.origins, flows):
        sl = (slice(oz, oz + p), slice(oy, oy + p), slice(ox, ox + p))
        acc[(slice(None),) + sl] += w * flow
        wsum[sl] += w
    assert np.all(wsum > 0), "tile plan left voxels uncovered"
    return acc / wsum


def register_volume(model: DdnModel, src: Volume3, tgt: Volume3, overlap: float = 0.5,
                    threads: int = 1, predict=None):
    """Register ``src`` onto ``tgt``; returns (DisplacementField, warped source).

    ``predict(src_tile, tgt_tile) -> (3, p, p, p)`` defaults to the model's
    inference forward pass. Tiles may run on several threads; results are
    always accumulated in tile order so the output does not depend on
    ``threads``.
    """
    if src.dims != tgt.dims:
        raise ValueError(f"source dims {src.dims} and target dims {tgt.dims} differ")
    p = model.config.patch_size
    plan = tile_volume(src.dims, p, overlap)
    if predict is None:
        def predict(s, t):
            return predict_flow(model, s, t)
    sdata, tdata = src.data, tgt.data

    def run(origin):
        ox, oy, oz = origin
        sl = (slice(oz, oz + p), slice(oy, oy + p), slice(ox, ox + p))
        return np.asarray(predict(sdata[sl], tdata[sl]), dtype=np.float64)

    threads = max(1, int(threads))
    log.info("registering %s with %d tiles of %d^3 on %d thread(s)", src.dims, len(plan), p, threads)
    if threads == 1:
        field = stitch(plan, map(run, plan.origins))
    else:
        # one BLAS thread per worker avoids oversubscription
        with threadpool_limits(1), ThreadPoolExecutor(threads) as pool:
            field = stitch(plan, pool.map(run, plan.origins))
    disp = DisplacementField(field.astype(np.float32))
    return disp, warp_volume(src, disp)

