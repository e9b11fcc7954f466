import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddnreg.errors import FormatError
from ddnreg.volume import (DisplacementField, Volume3, field_from_bytes, field_to_bytes, load_field,
                           load_volume, normalize_intensity, quantize, read_pnm, save_field,
                           save_volume, trilinear_sample, volume_from_bytes, volume_slice,
                           volume_to_bytes, write_pgm)


def test_single_voxel_file_layout():
    vol = Volume3(np.full((1, 1, 1), 0.25), spacing=(1.0, 2.0, 3.0))
    raw = volume_to_bytes(vol)
    # 4 magic + 4 version + 12 dims + 12 spacing + one f32
    assert len(raw) == 36
    assert raw[:4] == b"DDNV"
    assert struct.unpack_from("<I3I3f", raw, 4) == (1, 1, 1, 1, 1.0, 2.0, 3.0)
    assert struct.unpack_from("<f", raw, 32) == (0.25,)


def test_x_is_fastest_on_disk():
    vol = Volume3.from_xyz((3, 2, 1), np.arange(6))
    assert vol.dims == (3, 2, 1)
    assert vol.data[0, 1, 2] == 5
    payload = np.frombuffer(volume_to_bytes(vol)[32:], dtype="<f4")
    assert payload.tolist() == list(range(6))


@settings(max_examples=25, deadline=None)
@given(st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), st.integers(0, 2 ** 32 - 1))
def test_volume_round_trip_is_bit_exact(dims, seed):
    rng = np.random.default_rng(seed)
    dx, dy, dz = dims
    vol = Volume3(rng.standard_normal((dz, dy, dx)), spacing=tuple(rng.uniform(0.1, 3, 3)))
    again = volume_from_bytes(volume_to_bytes(vol))
    assert again == vol
    assert again.data.tobytes() == vol.data.tobytes()


def test_files_round_trip(tmp_path):
    vol = Volume3(np.random.default_rng(1).random((4, 5, 6)))
    save_volume(vol, tmp_path / "v.ddnv")
    assert load_volume(tmp_path / "v.ddnv") == vol
    field = DisplacementField(np.random.default_rng(2).standard_normal((3, 4, 5, 6)))
    save_field(field, tmp_path / "f.ddnf")
    assert load_field(tmp_path / "f.ddnf") == field


@pytest.mark.parametrize("mutate, offset", [
    (lambda b: b"XXXX" + b[4:], 0),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], 4),
    (lambda b: b[:8] + struct.pack("<I", 0) + b[12:], 8),
])
def test_bad_headers_report_offset(mutate, offset):
    raw = volume_to_bytes(Volume3(np.zeros((2, 2, 2))))
    with pytest.raises(FormatError) as info:
        volume_from_bytes(mutate(raw))
    assert info.value.offset == offset


def test_truncated_and_trailing_bytes():
    raw = volume_to_bytes(Volume3(np.zeros((2, 2, 2))))
    with pytest.raises(FormatError):
        volume_from_bytes(raw[:-1])
    with pytest.raises(FormatError):
        volume_from_bytes(raw[:20])
    with pytest.raises(FormatError):
        volume_from_bytes(raw + b"\0")


def test_field_rejects_nan_and_bad_size():
    with pytest.raises(ValueError):
        DisplacementField(np.full((3, 1, 1, 1), np.nan))
    raw = field_to_bytes(DisplacementField.zeros((2, 2, 2)))
    with pytest.raises(FormatError):
        field_from_bytes(raw[:-4])
    bad = bytearray(raw)
    bad[-4:] = struct.pack("<f", float("inf"))
    with pytest.raises(FormatError):
        field_from_bytes(bytes(bad))


def test_field_components():
    data = np.zeros((3, 2, 3, 4))
    data[0] = 1
    data[2] = -2
    f = DisplacementField(data)
    assert f.dims == (4, 3, 2)
    assert np.all(f.ux == 1) and np.all(f.uy == 0) and np.all(f.uz == -2)


def test_normalize_intensity():
    vol = Volume3(np.array([[[2.0, 4.0, 6.0]]]))
    assert normalize_intensity(vol).data.tolist() == [[[0.0, 0.5, 1.0]]]
    flat = normalize_intensity(Volume3(np.full((2, 2, 2), 7.0)))
    assert np.all(flat.data == 0)


def test_trilinear_sample_matches_plane():
    z, y, x = np.mgrid[:4, :5, :6]
    vol = Volume3(1.0 + 2 * x + 3 * y - z)
    assert trilinear_sample(vol, (1.25, 2.5, 0.75)) == pytest.approx(1 + 2.5 + 7.5 - 0.75)
    # clamped beyond the border
    assert trilinear_sample(vol, (10, 0, 0)) == pytest.approx(1 + 10)


def test_quantize_rounds_half_up():
    assert quantize([0.0, 0.5, 1.0, 1.5, -1]).tolist() == [0, 128, 255, 255, 0]


def test_slices_and_pgm(tmp_path):
    vol = Volume3(np.arange(24).reshape(2, 3, 4) / 23)
    assert volume_slice(vol, "z", 1).shape == (3, 4)
    assert volume_slice(vol, "y", 0).shape == (2, 4)
    assert volume_slice(vol, "x", 3).shape == (2, 3)
    with pytest.raises(IndexError):
        volume_slice(vol, "z", 2)
    img = quantize(volume_slice(vol, "z", 0))
    write_pgm(tmp_path / "s.pgm", img)
    assert np.array_equal(read_pnm(tmp_path / "s.pgm"), img)
