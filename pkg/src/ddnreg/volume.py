"""Volumes, displacement fields and their binary file formats.

Arrays are stored (z, y, x) so x varies fastest in memory, matching the
on-disk order. ``dims`` is always reported as (dx, dy, dz).

DDNV layout (little-endian)::

    0   4s  magic "DDNV"
    4   u32 version (1)
    8   3 x u32 dx, dy, dz
    20  3 x f32 sx, sy, sz
    32  dx*dy*dz x f32 values, x fastest
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

VOLUME_MAGIC = b"DDNV"
FIELD_MAGIC = b"DDNF"
VERSION = 1
_VOL_HEADER = struct.Struct("<4sI3I3f")
_FIELD_HEADER = struct.Struct("<4sI3I")
_MAX_VOXELS = 1 << 34


def _frozen(arr, dtype=np.float32):
    arr = np.array(arr, dtype=dtype, copy=True, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Volume3:
    """Dense 3D scalar image; ``data`` has shape (dz, dy, dx)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data))
        # held at file precision so a save/load round trip compares equal
        object.__setattr__(self, "spacing", tuple(float(np.float32(s)) for s in self.spacing))

    @classmethod
    def from_xyz(cls, dims, values, spacing=(1.0, 1.0, 1.0)):
        """Build from (dx, dy, dz) and a flat x-fastest value sequence."""
        dx, dy, dz = dims
        arr = np.asarray(values, dtype=np.float32)
        if arr.size != dx * dy * dz:
            raise ValueError(f"expected {dx * dy * dz} values, got {arr.size}")
        return cls(arr.reshape(dz, dy, dx), spacing)

    @property
    def dims(self):
        dz, dy, dx = self.data.shape
        return (dx, dy, dz)

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Volume3):
            return NotImplemented
        return (self.spacing == other.spacing and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())

    __hash__ = None


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement in voxel units; ``data`` has shape (3, dz, dy, dx).

    Component 0 is the x displacement, 1 is y, 2 is z, and the warped image
    is ``source(p + u(p))``.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] != 3 or min(data.shape) < 1:
            raise ValueError(f"field data must have shape (3, dz, dy, dx), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def zeros(cls, dims):
        dx, dy, dz = dims
        return cls(np.zeros((3, dz, dy, dx), dtype=np.float32))

    @property
    def dims(self):
        _, dz, dy, dx = self.data.shape
        return (dx, dy, dz)

    @property
    def ux(self):
        return self.data[0]

    @property
    def uy(self):
        return self.data[1]

    @property
    def uz(self):
        return self.data[2]

    def __eq__(self, other):
        if not isinstance(other, DisplacementField):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()

    __hash__ = None


# ------------------------------------------------------------------ file I/O

def _check_dims(dims, offset):
    if any(d < 1 for d in dims):
        raise FormatError(f"dimensions must be positive, got {dims}", offset)
    if math.prod(dims) > _MAX_VOXELS:
        raise FormatError(f"dimensions {dims} overflow the voxel limit", offset)


def volume_to_bytes(vol: Volume3) -> bytes:
    dx, dy, dz = vol.dims
    header = _VOL_HEADER.pack(VOLUME_MAGIC, VERSION, dx, dy, dz, *vol.spacing)
    return header + vol.data.astype("<f4").tobytes()


def volume_from_bytes(buf: bytes) -> Volume3:
    if len(buf) < 4 or buf[:4] != VOLUME_MAGIC:
        raise FormatError("bad magic, expected DDNV", 0)
    if len(buf) < _VOL_HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, dx, dy, dz, sx, sy, sz = _VOL_HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    _check_dims((dx, dy, dz), 8)
    n = dx * dy * dz
    end = _VOL_HEADER.size + 4 * n
    if len(buf) < end:
        raise FormatError(f"truncated payload: need {end} bytes, have {len(buf)}", len(buf))
    if len(buf) > end:
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end)
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_VOL_HEADER.size)
    return Volume3(data.reshape(dz, dy, dx), (sx, sy, sz))


def save_volume(vol: Volume3, path) -> None:
    Path(path).write_bytes(volume_to_bytes(vol))


def load_volume(path) -> Volume3:
    return volume_from_bytes(Path(path).read_bytes())


def field_to_bytes(field: DisplacementField) -> bytes:
    dx, dy, dz = field.dims
    return _FIELD_HEADER.pack(FIELD_MAGIC, VERSION, dx, dy, dz) + field.data.astype("<f4").tobytes()


def field_from_bytes(buf: bytes) -> DisplacementField:
    if len(buf) < 4 or buf[:4] != FIELD_MAGIC:
        raise FormatError("bad magic, expected DDNF", 0)
    if len(buf) < _FIELD_HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, dx, dy, dz = _FIELD_HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    _check_dims((dx, dy, dz), 8)
    n = 3 * dx * dy * dz
    end = _FIELD_HEADER.size + 4 * n
    if len(buf) != end:
        raise FormatError(f"payload size mismatch: need {end} bytes, have {len(buf)}",
                          min(len(buf), end))
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_FIELD_HEADER.size)
    try:
        return DisplacementField(data.reshape(3, dz, dy, dx))
    except ValueError as exc:
        raise FormatError(str(exc), _FIELD_HEADER.size) from None


def save_field(field: DisplacementField, path) -> None:
    Path(path).write_bytes(field_to_bytes(field))


def load_field(path) -> DisplacementField:
    return field_from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------ intensity / sampling

def normalize_intensity(vol: Volume3) -> Volume3:
    """Min-max rescale to [0, 1]; a constant volume maps to zeros."""
    data = vol.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return Volume3(np.zeros_like(vol.data), vol.spacing)
    out = (data - lo) / (hi - lo)
    return Volume3(np.clip(out, 0.0, 1.0), vol.spacing)


def trilinear_sample(vol: Volume3, point) -> float:
    """Trilinear interpolation at continuous voxel coordinates (x, y, z).

    Coordinates outside [0, d - 1] are clamped to the border.
    """
    data = vol.data
    idx = []
    for coord, n in zip(point, vol.dims):
        c = min(max(float(coord), 0.0), n - 1.0)
        if n == 1:
            idx.append((0, 0, 0.0))
            continue
        i0 = min(int(math.floor(c)), n - 2)
        idx.append((i0, i0 + 1, c - i0))
    (x0, x1, fx), (y0, y1, fy), (z0, z1, fz) = idx
    value = 0.0
    for zi, wz in ((z0, 1 - fz), (z1, fz)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for xi, wx in ((x0, 1 - fx), (x1, fx)):
                value += wz * wy * wx * float(data[zi, yi, xi])
    return value


# ------------------------------------------------------------------ images

def quantize(values) -> np.ndarray:
    """Map [0, 1] floats to 8-bit with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def volume_slice(vol: Volume3, axis: str, index: int) -> np.ndarray:
    """2D slice as a (rows, cols) array: z -> (y, x), y -> (z, x), x -> (z, y)."""
    axis = axis.lower()
    pos = {"x": 2, "y": 1, "z": 0}
    if axis not in pos:
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    extent = vol.data.shape[pos[axis]]
    if not 0 <= index < extent:
        raise IndexError(f"slice index {index} out of range for {axis} extent {extent}")
    return np.take(vol.data, index, axis=pos[axis])


def write_pgm(path, image) -> None:
    img = np.asarray(image, dtype=np.uint8)
    rows, cols = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (cols, rows) + img.tobytes())


def write_ppm(path, image) -> None:
    img = np.asarray(image, dtype=np.uint8)
    rows, cols, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (cols, rows) + img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 image written by this module."""
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file", 0)
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    channels = 1 if parts[0] == b"P5" else 3
    payload = buf[len(buf) - rows * cols * channels:]
    img = np.frombuffer(payload, dtype=np.uint8)
    return img.reshape(rows, cols) if channels == 1 else img.reshape(rows, cols, 3)


def export_slice_gray(vol: Volume3, axis: str, index: int, path) -> None:
    write_pgm(path, quantize(volume_slice(vol, axis, index)))
