import struct

import numpy as np
import pytest

from ddnreg.errors import ConfigError, FormatError
from ddnreg.evalkit import smooth_phantom
from ddnreg.patches import (EdgeParams, PatchPairSet, candidate_origins, dataset_from_bytes,
                            dataset_to_bytes, edge_map, edge_mask, gradient_magnitude, hysteresis,
                            informativeness, read_patch_dataset, sample_patch_pairs,
                            write_patch_dataset)
from ddnreg.volume import Volume3


@pytest.fixture(scope="module")
def phantom():
    return smooth_phantom((40, 36, 32), blobs=12, seed=3, radius=(3.0, 6.0))


def test_edge_params_validation():
    EdgeParams(0.0, 1.0)
    for lo, hi in ((0.5, 0.5), (-0.1, 0.5), (0.2, 1.1), (0.6, 0.5)):
        with pytest.raises(ConfigError):
            EdgeParams(lo, hi)


def test_constant_volume_has_no_edges():
    out = edge_map(Volume3(np.full((8, 8, 8), 0.3)), EdgeParams())
    assert np.all(out.data == 0)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_step_plane_gives_one_voxel_thick_edge(axis):
    data = np.zeros((12, 12, 12))
    index = [slice(None)] * 3
    index[axis] = slice(6, None)
    data[tuple(index)] = 1.0
    mask = edge_mask(data, EdgeParams())
    other = tuple(a for a in range(3) if a != axis)
    per_plane = mask.sum(axis=other)
    # the smoothed step peaks symmetrically between planes 5 and 6; ties go to the low side
    assert per_plane.tolist() == [144 if i == 5 else 0 for i in range(12)]


def test_hysteresis_links_weak_to_strong():
    mag = np.zeros((5, 5, 7))
    mag[2, 2, 1:6] = [0.6, 0.3, 0.3, 0.03, 0.01]   # strong head, weak tail, sub-threshold end
    mag[0, 0, 0] = 0.3                             # isolated weak voxel
    kept = hysteresis(mag, 0.02, 0.5)
    assert kept[2, 2, 1:6].tolist() == [True, True, True, True, False]
    assert not kept[0, 0, 0]


def test_hysteresis_without_strong_voxels_is_empty():
    mag = np.zeros((6, 6, 6))
    mag[3, 3, :] = 0.3
    assert not hysteresis(mag, 0.02, 0.5).any()


def test_diagonal_neighbours_are_connected():
    mag = np.zeros((4, 4, 4))
    mag[0, 0, 0] = 0.9
    mag[1, 1, 1] = 0.1
    assert hysteresis(mag, 0.02, 0.5)[1, 1, 1]


def test_low_contrast_step_survives_only_through_normalisation():
    data = np.zeros((10, 10, 10))
    data[:, :, 5:] = 0.3
    mag, *_ = gradient_magnitude(data)
    assert mag.max() == pytest.approx(1.0)
    assert edge_mask(data, EdgeParams()).sum() == 100


def test_edge_map_ignores_constant_offset(phantom):
    params = EdgeParams()
    base = edge_mask(phantom.data.astype(np.float64), params)
    shifted = edge_mask(phantom.data.astype(np.float64) + 0.25, params)
    assert base.any()
    assert np.array_equal(base, shifted)


def test_informativeness():
    assert informativeness(np.ones((4, 4, 4))) == 1.0
    assert informativeness(np.zeros((4, 4, 4))) == 0.0
    patch = np.zeros(64)
    patch[:8] = 1
    assert informativeness(patch.reshape(4, 4, 4)) == 0.125


def test_zero_threshold_accepts_everything(phantom):
    ds = sample_patch_pairs(phantom, phantom, EdgeParams(), 15, 16, 0.0, seed=1)
    assert len(ds) == 15 and ds.attempts == 15 and not ds.exhausted


def test_impossible_threshold_exhausts_budget(phantom):
    ds = sample_patch_pairs(phantom, phantom, EdgeParams(), 3, 16, 1.01, seed=1)
    assert len(ds) == 0 and ds.exhausted and ds.attempts == 300


def test_sampling_is_deterministic_and_in_bounds(phantom):
    a = sample_patch_pairs(phantom, phantom, EdgeParams(), 20, 16, 0.01, seed=9)
    b = sample_patch_pairs(phantom, phantom, EdgeParams(), 20, 16, 0.01, seed=9)
    assert a == b
    dims = np.array(phantom.dims)
    assert np.all(a.origins >= 0) and np.all(a.origins <= dims - 16)


def test_accepted_patches_meet_threshold(phantom):
    ds = sample_patch_pairs(phantom, phantom, EdgeParams(), 10, 16, 0.02, seed=4)
    edges = edge_mask(phantom.data, EdgeParams())
    for pair in ds.pairs:
        ox, oy, oz = pair.origin
        assert informativeness(edges[oz:oz + 16, oy:oy + 16, ox:ox + 16]) >= 0.02
        assert np.array_equal(pair.src, phantom.data[oz:oz + 16, oy:oy + 16, ox:ox + 16])


def test_raising_threshold_never_raises_acceptance(phantom):
    rates = []
    for th in (0.0, 0.005, 0.01, 0.02, 0.04, 0.08):
        ds = sample_patch_pairs(phantom, phantom, EdgeParams(), 10, 16, th, seed=2)
        rates.append(ds.acceptance_rate)
    assert all(later <= earlier for earlier, later in zip(rates, rates[1:]))


def test_candidate_stream_is_prefix_stable():
    short = candidate_origins((50, 40, 30), 8, 10, seed=5)
    long = candidate_origins((50, 40, 30), 8, 3000, seed=5)
    assert np.array_equal(long[:10], short)


def test_patch_larger_than_volume(phantom):
    with pytest.raises(ValueError):
        sample_patch_pairs(phantom, phantom, EdgeParams(), 1, 33, 0.0)


def _three_pair_set():
    rng = np.random.default_rng(0)
    return PatchPairSet(4, [[0, 1, 2], [3, 4, 5], [6, 7, 8]], rng.random((3, 4, 4, 4)),
                        rng.random((3, 4, 4, 4)))


def test_dataset_round_trip(tmp_path):
    ds = _three_pair_set()
    write_patch_dataset(ds, tmp_path / "d.ddnp")
    assert read_patch_dataset(tmp_path / "d.ddnp") == ds


def test_dataset_layout():
    raw = dataset_to_bytes(_three_pair_set())
    assert raw[:4] == b"DDNP"
    assert struct.unpack_from("<IIQ", raw, 4) == (1, 4, 3)
    assert len(raw) == 20 + 3 * (12 + 2 * 64 * 4)
    assert struct.unpack_from("<3I", raw, 20) == (0, 1, 2)


def test_empty_dataset_is_valid():
    raw = dataset_to_bytes(PatchPairSet(8))
    assert len(raw) == 20
    assert len(dataset_from_bytes(raw)) == 0


def test_dataset_errors():
    raw = dataset_to_bytes(_three_pair_set())
    with pytest.raises(FormatError):
        dataset_from_bytes(raw[:-1])
    with pytest.raises(FormatError):
        dataset_from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        dataset_from_bytes(raw[:10])
