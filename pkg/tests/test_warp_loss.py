import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from ddnreg import autodiff as ad
from ddnreg.errors import ConfigError
from ddnreg.loss import LossConfig, diffusion_reg, loss_terms, ncc_loss, total_loss
from ddnreg.volume import DisplacementField, Volume3
from ddnreg.warp import warp_patch, warp_volume

from oracles import diffusion_loops, local_cc_loss_loops, warp_loops


def _smooth(rng, shape, sigma=1.0):
    out = gaussian_filter(rng.random(shape), sigma)
    return (out - out.min()) / (out.max() - out.min())


# ------------------------------------------------------------------ warp

def test_zero_flow_is_exact_identity():
    src = np.random.default_rng(0).random((2, 1, 5, 6, 7)).astype(np.float32)
    out = warp_patch(src, np.zeros((2, 3, 5, 6, 7), dtype=np.float32))
    assert np.array_equal(out.data, src)


def test_unit_x_shift_on_ramp():
    ramp = np.broadcast_to(np.arange(6.0) * 0.5, (1, 1, 4, 5, 6)).copy()
    flow = np.zeros((1, 3, 4, 5, 6))
    flow[:, 0] = 1.0
    out = warp_patch(ramp, flow).data[0, 0]
    assert np.allclose(out[..., :-1], ramp[0, 0, ..., 1:])
    assert np.allclose(out[..., -1], ramp[0, 0, ..., -1])  # clamped at +x


def test_warp_matches_point_sampler():
    rng = np.random.default_rng(1)
    src = rng.random((1, 1, 4, 5, 6))
    flow = rng.uniform(-2.5, 2.5, (1, 3, 4, 5, 6))
    assert np.allclose(warp_patch(src, flow).data[0, 0], warp_loops(src[0, 0], flow[0]), atol=1e-12)


def test_flow_gradient_finite_differences():
    rng = np.random.default_rng(2)
    src = ad.Tensor(_smooth(rng, (1, 1, 6, 6, 6)), requires_grad=True)
    flow = ad.Tensor(rng.uniform(-1.5, 1.5, (1, 3, 6, 6, 6)), requires_grad=True)
    proj = rng.standard_normal((1, 1, 6, 6, 6))
    err = ad.grad_check(lambda: ad.sum_all(ad.mul(warp_patch(src, flow), proj)), [src, flow], 1e-4)
    assert err < 1e-4


def test_warp_volume_shift_in_z():
    data = np.random.default_rng(3).random((5, 4, 3))
    field = np.zeros((3, 5, 4, 3))
    field[2] = 1.0
    out = warp_volume(Volume3(data), DisplacementField(field)).data
    assert np.allclose(out[:-1], data[1:].astype(np.float32))
    assert np.allclose(out[-1], data[-1].astype(np.float32))
    zero = warp_volume(Volume3(data), DisplacementField.zeros((3, 4, 5)))
    assert zero == Volume3(data)


def test_warp_volume_agrees_with_warp_patch():
    rng = np.random.default_rng(4)
    vol = Volume3(rng.random((6, 7, 8)))
    field = DisplacementField(rng.uniform(-2, 2, (3, 6, 7, 8)))
    a = warp_volume(vol, field).data
    b = warp_patch(vol.data[None, None], field.data[None]).data[0, 0]
    assert np.max(np.abs(a - b)) < 1e-6


def test_warp_shape_errors():
    with pytest.raises(ValueError):
        warp_patch(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 4, 4, 4)))
    with pytest.raises(ValueError):
        warp_volume(Volume3(np.zeros((2, 2, 2))), DisplacementField.zeros((3, 2, 2)))


# ------------------------------------------------------------------ NCC

def test_identical_patches_score_minus_one():
    a = _smooth(np.random.default_rng(5), (1, 1, 12, 12, 12))
    assert ncc_loss(a, a).item() == pytest.approx(-1.0, abs=1e-4)


def test_anticorrelated_affine_still_minus_one():
    a = _smooth(np.random.default_rng(6), (1, 1, 12, 12, 12))
    assert ncc_loss(a, 1.0 - a).item() == pytest.approx(-1.0, abs=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_ncc_matches_loops(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((1, 1, 9, 9, 9)), rng.random((1, 1, 9, 9, 9))
    assert abs(ncc_loss(a, b, window=9).item() - local_cc_loss_loops(a[0, 0], b[0, 0], 9)) < 1e-6


def test_global_mode():
    rng = np.random.default_rng(7)
    a, b = rng.random((1, 1, 6, 6, 6)), rng.random((1, 1, 6, 6, 6))
    r = np.corrcoef(a.ravel(), b.ravel())[0, 1]
    assert ncc_loss(a, b, mode="global", eps=0).item() == pytest.approx(-r * r, rel=1e-9)


def test_ncc_shape_mismatch():
    with pytest.raises(ValueError):
        ncc_loss(np.zeros((1, 1, 4, 4, 4)), np.zeros((1, 1, 4, 4, 5)))


# ------------------------------------------------------------------ diffusion and total

def test_constant_flow_is_free():
    assert diffusion_reg(np.full((1, 3, 4, 4, 4), 2.5)).item() == 0.0


def test_shear_matches_loop():
    flow = np.zeros((1, 3, 4, 4, 4))
    flow[:, 0] = np.arange(4.0)
    # 48 unit x-differences over 192 components
    assert diffusion_reg(flow).item() == pytest.approx(diffusion_loops(flow)) == pytest.approx(0.25)


def test_diffusion_is_quadratic():
    flow = np.random.default_rng(8).standard_normal((1, 3, 5, 5, 5))
    base = diffusion_reg(flow).item()
    assert diffusion_reg(3.0 * flow).item() == pytest.approx(9.0 * base)


def test_total_loss_pieces():
    rng = np.random.default_rng(9)
    src = _smooth(rng, (1, 1, 8, 8, 8))
    flow = rng.uniform(-1, 1, (1, 3, 8, 8, 8))
    total, sim, smooth = loss_terms(src, src, flow, LossConfig(lambda_smooth=0.0))
    assert total.item() == pytest.approx(sim.item())
    zero = total_loss(src, src, np.zeros_like(flow), LossConfig())
    assert zero.item() == pytest.approx(-1.0, abs=1e-4)
    total, sim, smooth = loss_terms(src, src, flow, LossConfig(lambda_smooth=2.0))
    assert total.item() == pytest.approx(sim.item() + 2.0 * smooth.item(), rel=1e-6)


def test_total_loss_gradient_on_toy():
    rng = np.random.default_rng(10)
    src = ad.Tensor(_smooth(rng, (1, 1, 8, 8, 8)), requires_grad=True)
    tgt = ad.Tensor(_smooth(rng, (1, 1, 8, 8, 8)), requires_grad=True)
    flow = ad.Tensor(rng.uniform(-1.5, 1.5, (1, 3, 8, 8, 8)), requires_grad=True)
    cfg = LossConfig(lambda_smooth=0.3, cc_window=5)
    assert ad.grad_check(lambda: total_loss(src, tgt, flow, cfg), [flow], 1e-4) < 1e-3


@pytest.mark.parametrize("kwargs", [{"cc_window": 4}, {"cc_window": 1}, {"lambda_smooth": -1},
                                    {"cc_mode": "nope"}])
def test_loss_config_validation(kwargs):
    with pytest.raises(ConfigError):
        LossConfig(**kwargs)
