"""Edge-filtered patch-pair extraction and the DDNP dataset format.

DDNP layout (little-endian)::

    "DDNP", u32 version (1), u32 patch size p, u64 count
    per pair: 3 x u32 origin (ox, oy, oz), p^3 f32 src, p^3 f32 tgt (x fastest)
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import ConfigError, FormatError
from .volume import Volume3, normalize_intensity

log = logging.getLogger(__name__)

DATASET_MAGIC = b"DDNP"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
SMOOTH_SIGMA = 1.0
RETRY_FACTOR = 100
_CANDIDATE_BLOCK = 1024
_CONN26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class EdgeParams:
    t_low: float = 0.02
    t_high: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.t_low < self.t_high <= 1.0:
            raise ConfigError(f"need 0 <= t_low < t_high <= 1, got ({self.t_low}, {self.t_high})")


@dataclass(frozen=True)
class PatchPair:
    src: np.ndarray
    tgt: np.ndarray
    origin: tuple


# ------------------------------------------------------------------ edges

def gradient_magnitude(data):
    """Smoothed central-difference gradient; returns (mag scaled to [0, 1], gx, gy, gz)."""
    smooth = ndimage.gaussian_filter(np.asarray(data, dtype=np.float64), SMOOTH_SIGMA,
                                     mode="nearest")
    grads = [np.zeros_like(smooth) if n < 2 else np.gradient(smooth, axis=a)
             for a, n in enumerate(smooth.shape)]
    gz, gy, gx = grads
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return mag, gx, gy, gz


def hysteresis(mag, t_low, t_high):
    """Keep voxels >= t_low that are 26-connected to a voxel >= t_high."""
    weak = (mag >= t_low) & (mag > 0)
    labels, count = ndimage.label(weak, structure=_CONN26)
    if count == 0:
        return np.zeros(mag.shape, dtype=bool)
    strong_labels = np.unique(labels[(mag >= t_high) & weak])
    keep = np.zeros(count + 1, dtype=bool)
    keep[strong_labels] = True
    keep[0] = False
    return keep[labels]


def edge_mask(data, params: EdgeParams) -> np.ndarray:
    """Boolean 3D Canny edge mask of a (z, y, x) array."""
    mag, gx, gy, gz = gradient_magnitude(data)
    thin = _kernels.nms3d(np.ascontiguousarray(mag), np.ascontiguousarray(gx),
                          np.ascontiguousarray(gy), np.ascontiguousarray(gz))
    return hysteresis(thin, params.t_low, params.t_high)


def edge_map(vol: Volume3, params: EdgeParams) -> Volume3:
    """Binary (0/1) edge volume."""
    return Volume3(edge_mask(vol.data, params).astype(np.float32), vol.spacing)


def informativeness(edge_patch) -> float:
    """Fraction of edge voxels in a binary patch."""
    return float(np.mean(np.asarray(edge_patch, dtype=np.float64)))


def _summed_volume(mask):
    """Zero-prefixed 3D cumulative sum so box counts are 8 lookups."""
    sat = np.zeros(tuple(n + 1 for n in mask.shape), dtype=np.int64)
    sat[1:, 1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    return sat


def _box_counts(sat, origins, p):
    """Edge counts of p^3 boxes at (ox, oy, oz) origins."""
    x0, y0, z0 = origins[:, 0], origins[:, 1], origins[:, 2]
    x1, y1, z1 = x0 + p, y0 + p, z0 + p
    return (sat[z1, y1, x1] - sat[z0, y1, x1] - sat[z1, y0, x1] - sat[z1, y1, x0]
            + sat[z0, y0, x1] + sat[z0, y1, x0] + sat[z1, y0, x0] - sat[z0, y0, x0])


# ------------------------------------------------------------------ datasets

@dataclass(eq=False)
class PatchPairSet:
    """Patch pairs held as stacked arrays: src/tgt (n, p, p, p), origins (n, 3) as (x, y, z)."""

    patch_size: int
    origins: np.ndarray = None
    src: np.ndarray = None
    tgt: np.ndarray = None
    attempts: int = 0
    exhausted: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = self.patch_size
        if self.origins is None:
            self.origins = np.zeros((0, 3), dtype=np.uint32)
            self.src = np.zeros((0, p, p, p), dtype=np.float32)
            self.tgt = np.zeros((0, p, p, p), dtype=np.float32)
        self.origins = np.asarray(self.origins, dtype=np.uint32).reshape(-1, 3)
        self.src = np.asarray(self.src, dtype=np.float32)
        self.tgt = np.asarray(self.tgt, dtype=np.float32)
        n = len(self.origins)
        if self.src.shape != (n, p, p, p) or self.tgt.shape != (n, p, p, p):
            raise ValueError(f"patch arrays {self.src.shape}/{self.tgt.shape} do not match "
                             f"{n} pairs of side {p}")

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, i) -> PatchPair:
        return PatchPair(self.src[i], self.tgt[i], tuple(int(v) for v in self.origins[i]))

    @property
    def pairs(self):
        return [self[i] for i in range(len(self))]

    @property
    def acceptance_rate(self):
        return len(self) / self.attempts if self.attempts else 0.0

    def __eq__(self, other):
        if not isinstance(other, PatchPairSet):
            return NotImplemented
        return (self.patch_size == other.patch_size
                and np.array_equal(self.origins, other.origins)
                and self.src.tobytes() == other.src.tobytes()
                and self.tgt.tobytes() == other.tgt.tobytes())

    __hash__ = None


def candidate_origins(dims, p, total, seed):
    """The seeded candidate stream, drawn in fixed-size blocks so it is prefix-stable."""
    hi = np.array(dims, dtype=np.int64) - p
    rng = np.random.default_rng(seed)
    out = []
    drawn = 0
    while drawn < total:
        out.append(rng.integers(0, hi + 1, size=(_CANDIDATE_BLOCK, 3)))
        drawn += _CANDIDATE_BLOCK
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(out)[:total]


def sample_patch_pairs(src: Volume3, tgt: Volume3, params: EdgeParams, count: int,
                       patch_size: int = 32, threshold: float = 0.1, seed: int = 0) -> PatchPairSet:
    """Randomly pick patch pairs whose src and tgt edge densities both reach ``threshold``.

    Both volumes are min-max normalised first. At most ``100 * count``
    candidates are examined; if that runs out the result is short and
    ``exhausted`` is set.
    """
    if src.dims != tgt.dims:
        raise ValueError(f"source dims {src.dims} and target dims {tgt.dims} differ")
    p = int(patch_size)
    if any(p > d for d in src.dims):
        raise ValueError(f"patch size {p} exceeds volume dims {src.dims}")
    if count < 0:
        raise ValueError("count must be >= 0")
    src_n, tgt_n = normalize_intensity(src), normalize_intensity(tgt)
    budget = RETRY_FACTOR * count
    cand = candidate_origins(src.dims, p, budget, seed)

    if threshold <= 0:
        accepted = np.ones(len(cand), dtype=bool)
    else:
        vox = float(p ** 3)
        counts = []
        for vol in (src_n, tgt_n):
            sat = _summed_volume(edge_mask(vol.data, params))
            counts.append(_box_counts(sat, cand, p) / vox)
        accepted = (counts[0] >= threshold) & (counts[1] >= threshold)

    idx = np.flatnonzero(accepted)[:count]
    attempts = int(idx[-1]) + 1 if len(idx) == count and count > 0 else len(cand)
    exhausted = len(idx) < count
    if exhausted:
        log.warning("retry budget of %d candidates exhausted: %d of %d pairs accepted",
                    budget, len(idx), count)
    origins = cand[idx]
    src_p = np.empty((len(idx), p, p, p), dtype=np.float32)
    tgt_p = np.empty_like(src_p)
    for i, (ox, oy, oz) in enumerate(origins):
        src_p[i] = src_n.data[oz:oz + p, oy:oy + p, ox:ox + p]
        tgt_p[i] = tgt_n.data[oz:oz + p, oy:oy + p, ox:ox + p]
    return PatchPairSet(p, origins, src_p, tgt_p, attempts=attempts, exhausted=exhausted)


def _record_dtype(p):
    return np.dtype([("origin", "<u4", (3,)), ("src", "<f4", (p ** 3,)), ("tgt", "<f4", (p ** 3,))])


def dataset_to_bytes(ds: PatchPairSet) -> bytes:
    p = ds.patch_size
    rec = np.empty(len(ds), dtype=_record_dtype(p))
    rec["origin"] = ds.origins
    rec["src"] = ds.src.reshape(len(ds), p ** 3)
    rec["tgt"] = ds.tgt.reshape(len(ds), p ** 3)
    return _HEADER.pack(DATASET_MAGIC, VERSION, p, len(ds)) + rec.tobytes()


def dataset_from_bytes(buf: bytes) -> PatchPairSet:
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise FormatError("bad magic, expected DDNP", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, p, count = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if p < 1:
        raise FormatError(f"invalid patch size {p}", 8)
    dt = _record_dtype(p)
    need = _HEADER.size + count * dt.itemsize
    if len(buf) != need:
        raise FormatError(f"size mismatch: {count} pairs of side {p} need {need} bytes, "
                          f"have {len(buf)}", min(len(buf), need))
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=_HEADER.size)
    return PatchPairSet(p, rec["origin"].copy(), rec["src"].reshape(count, p, p, p).copy(),
                        rec["tgt"].reshape(count, p, p, p).copy())


def write_patch_dataset(ds: PatchPairSet, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_patch_dataset(path) -> PatchPairSet:
    return dataset_from_bytes(Path(path).read_bytes())
