"""Similarity metrics, synthetic deformations, rendering and the register-back validation."""
from __future__ import annotations

import logging
from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import UndefinedMetricError
from .infer import register_volume
from .volume import DisplacementField, Volume3, normalize_intensity, quantize
from .warp import warp_volume

log = logging.getLogger(__name__)

DEFAULT_BINS = 32
RANGE_SLACK = 1e-6


def _data(v):
    return v.data if isinstance(v, Volume3) else np.asarray(v)


def global_ncc(a, b) -> float:
    """Pearson correlation over all voxels, accumulated in float64."""
    x = _data(a).astype(np.float64).ravel()
    y = _data(b).astype(np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {_data(a).shape} vs {_data(b).shape}")
    x = x - x.mean()
    y = y - y.mean()
    sxx, syy = np.dot(x, x), np.dot(y, y)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("correlation is undefined for a constant input")
    return float(np.dot(x, y) / np.sqrt(sxx * syy))


def _bin_index(x, bins):
    # interpolated float32 data can overshoot [0, 1] by an ulp or so
    if x.size and (x.min() < -RANGE_SLACK or x.max() > 1 + RANGE_SLACK or not np.all(np.isfinite(x))):
        raise ValueError("mutual_information expects values in [0, 1]")
    return np.clip((x * bins).astype(np.int64), 0, bins - 1)


def joint_histogram(a, b, bins=DEFAULT_BINS) -> np.ndarray:
    x = _data(a).astype(np.float64).ravel()
    y = _data(b).astype(np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {_data(a).shape} vs {_data(b).shape}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    i, j = _bin_index(x, bins), _bin_index(y, bins)
    return np.bincount(i * bins + j, minlength=bins * bins).reshape(bins, bins)


def mutual_information(a, b, bins: int = DEFAULT_BINS) -> float:
    """Histogram mutual information in nats over uniform bins on [0, 1]."""
    joint = joint_histogram(a, b, bins).astype(np.float64)
    pij = joint / joint.sum()
    pi = pij.sum(axis=1, keepdims=True)
    pj = pij.sum(axis=0, keepdims=True)
    nz = pij > 0
    return float(np.sum(pij[nz] * np.log(pij[nz] / (pi * pj)[nz])))


# ------------------------------------------------------------------ synthetic data

def _lerp_matrix(n, spacing):
    """(n, nodes) linear interpolation weights from control nodes every ``spacing`` voxels."""
    nodes = -(-(n - 1) // spacing) + 1
    pos = np.arange(n) / spacing
    i0 = np.minimum(np.floor(pos).astype(int), max(nodes - 2, 0))
    frac = pos - i0
    m = np.zeros((n, nodes))
    m[np.arange(n), i0] += 1.0 - frac
    if nodes > 1:
        m[np.arange(n), i0 + 1] += frac
    return m


def control_grid(dims, grid_spacing: int = 16, sigma: float = 3.0, seed: int = 0) -> np.ndarray:
    """Normal(0, sigma) node displacements, shape (3, nz, ny, nx), boundary nodes included."""
    if grid_spacing < 2:
        raise ValueError("grid_spacing must be >= 2")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    dx, dy, dz = dims
    shape = tuple(-(-(n - 1) // grid_spacing) + 1 for n in (dz, dy, dx))
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, sigma, size=(3,) + shape) if sigma > 0 else np.zeros((3,) + shape)


def gaussian_deformation(dims, grid_spacing: int = 16, sigma: float = 3.0,
                         seed: int = 0) -> DisplacementField:
    """Smooth random field: trilinear upsampling of a random control grid, zero on the faces."""
    dx, dy, dz = dims
    nodes = control_grid(dims, grid_spacing, sigma, seed)
    mz, my, mx = (_lerp_matrix(n, grid_spacing) for n in (dz, dy, dx))
    field = np.einsum("cijk,zi,yj,xk->czyx", nodes, mz, my, mx, optimize=True)
    field[:, [0, -1]] = 0.0
    field[:, :, [0, -1]] = 0.0
    field[:, :, :, [0, -1]] = 0.0
    return DisplacementField(field.astype(np.float32))


def smooth_phantom(dims, blobs: int = 20, seed: int = 0, radius=(3.0, 6.0)) -> Volume3:
    """Sum of random isotropic Gaussian blobs, rescaled to [0, 1].

    Blob radii are drawn uniformly from ``radius`` (voxels) and amplitudes
    from [0.3, 1].
    """
    dx, dy, dz = dims
    rng = np.random.default_rng(seed)
    z, y, x = np.ogrid[:dz, :dy, :dx]
    out = np.zeros((dz, dy, dx))
    for _ in range(blobs):
        cx, cy, cz = rng.uniform(0, dx - 1), rng.uniform(0, dy - 1), rng.uniform(0, dz - 1)
        r = rng.uniform(*radius)
        amp = rng.uniform(0.3, 1.0)
        out += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2) / (2 * r * r))
    return normalize_intensity(Volume3(out))


# ------------------------------------------------------------------ rendering

def difference_image(a, b) -> np.ndarray:
    """8-bit triangular map of the difference: 255 where equal, 0 at |a - b| = 1."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return quantize(1.0 - np.abs(d))


def overlay_rg(tgt, reg) -> np.ndarray:
    """RGB overlay with the target in red and the registered image in green."""
    r = quantize(tgt)
    g = quantize(reg)
    if r.shape != g.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {g.shape}")
    return np.stack([r, g, np.zeros_like(r)], axis=-1)


# ------------------------------------------------------------------ validation

@dataclass(frozen=True)
class ValidationReport:
    cc_before: float
    mi_before: float
    cc_after: float
    mi_after: float

    @staticmethod
    def header() -> str:
        return ",".join(f.name for f in fields(ValidationReport))

    def csv_line(self) -> str:
        return ",".join(repr(float(v)) for v in astuple(self))


def validation_run(model, vol: Volume3, grid_spacing: int = 16, sigma: float = 3.0, seed: int = 0,
                   overlap: float = 0.5, bins: int = DEFAULT_BINS, threads: int = 1):
    """Deform ``vol`` with a random field, register it back, and score before/after.

    Returns (report, deformation, recovered field, warped volume).
    """
    vol = normalize_intensity(vol)
    deform = gaussian_deformation(vol.dims, grid_spacing, sigma, seed)
    deformed = warp_volume(vol, deform)
    field, warped = register_volume(model, deformed, vol, overlap=overlap, threads=threads)
    report = ValidationReport(
        cc_before=global_ncc(deformed, vol), mi_before=mutual_information(deformed, vol, bins),
        cc_after=global_ncc(warped, vol), mi_after=mutual_information(warped, vol, bins))
    log.info("validation: %s", report)
    return report, deform, field, warped
