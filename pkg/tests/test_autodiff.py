import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from ddnreg import autodiff as ad
from ddnreg.errors import NumericError

from oracles import conv3d_loops


def _param(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _grads(fn, *params):
    g = ad.Graph()
    with g:
        loss = fn()
    grads = ad.backward(g, loss)
    return [grads[p] for p in params]


# ------------------------------------------------------------------ conv3d

def test_pointwise_identity():
    x = np.random.default_rng(0).random((1, 1, 3, 4, 5))
    out = ad.conv3d(x, np.ones((1, 1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out.data, x)


def test_box_kernel_interior_value():
    out = ad.conv3d(np.ones((1, 1, 5, 5, 5)), np.ones((1, 1, 3, 3, 3)), padding="valid")
    assert out.shape == (1, 1, 3, 3, 3)
    assert np.all(out.data == 27)


@pytest.mark.parametrize("stride, padding", [(1, "same"), (1, "valid"), (2, "same"), (2, "valid")])
def test_conv_matches_loops(stride, padding):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    out = ad.conv3d(x, w, b, stride=stride, padding=padding)
    ref = conv3d_loops(x, w, b, stride, 1 if padding == "same" else 0)
    assert out.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) < 1e-6


def test_conv_float32_path():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 5, 6, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 5, 3, 3, 3)).astype(np.float32)
    out = ad.conv3d(x, w)
    assert out.dtype == np.float32
    ref = conv3d_loops(x[:1].astype(np.float64), w.astype(np.float64), None, 1, 1)
    assert np.allclose(out.data[:1], ref, atol=1e-4)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        ad.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(ValueError):
        ad.conv3d(np.zeros((1, 1, 4, 4, 4)), np.zeros((1, 1, 2, 2, 2)))


# ------------------------------------------------------------------ batch norm etc.

def test_batch_norm_train_normalises():
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4, 4)) * 5 + 2
    rm, rv = np.zeros(3), np.ones(3)
    out = ad.batch_norm(x, np.ones(3), np.zeros(3), rm, rv, training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)
    assert np.allclose(out.var(axis=(0, 2, 3, 4)), 1, atol=1e-3)
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3, 4)))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3, 4)))


def test_batch_norm_affine_and_infer_identity():
    x = np.random.default_rng(2).standard_normal((2, 2, 3, 3, 3))
    out = ad.batch_norm(x, np.full(2, 2.0), np.full(2, 3.0), np.zeros(2), np.ones(2), training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3, 4)), 3)
    assert np.allclose(out.std(axis=(0, 2, 3, 4)), 2, atol=1e-4)
    ident = ad.batch_norm(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=False, eps=0.0)
    assert np.allclose(ident.data, x)


def test_leaky_relu_values():
    out = ad.leaky_relu(np.array([2.0, -2.0]), 0.2).data
    assert out.tolist() == [2.0, pytest.approx(-0.4)]
    x = np.random.default_rng(3).standard_normal(10)
    assert np.array_equal(ad.leaky_relu(x, 1.0).data, x)


def test_concat_channels():
    a = np.random.default_rng(4).random((1, 2, 2, 2, 2))
    b = np.random.default_rng(5).random((1, 3, 2, 2, 2))
    assert np.array_equal(ad.concat_channels([a]).data, a)
    out = ad.concat_channels([a, b])
    assert out.shape[1] == 5 and np.array_equal(out.data[:, :2], a)
    ta, tb = _param(a), _param(b)
    ga, gb = _grads(lambda: ad.sum_all(ad.concat_channels([ta, tb])), ta, tb)
    assert np.all(ga == 1) and np.all(gb == 1)
    with pytest.raises(ValueError):
        ad.concat_channels([a, np.zeros((1, 1, 3, 2, 2))])


def test_avg_pool():
    assert np.all(ad.avg_pool3d(np.full((1, 1, 4, 4, 4), 1.5)).data == 1.5)
    x = _param(np.arange(8.0).reshape(1, 1, 2, 2, 2))
    assert ad.avg_pool3d(x).data.item() == 3.5
    (g,) = _grads(lambda: ad.sum_all(ad.scale(ad.avg_pool3d(x), 4.0)), x)
    assert np.all(g == 0.5)


def test_upsample_constant_and_ramp():
    assert np.allclose(ad.upsample_trilinear(np.full((1, 2, 3, 3, 3), 0.7)).data, 0.7)
    x = np.broadcast_to(np.arange(4.0), (1, 1, 4, 4, 4))
    up = ad.upsample_trilinear(x).data
    # align-corners: output sample i sits at i * 3 / 7 input units
    assert np.allclose(up[0, 0, 0, 0], np.arange(8) * 3 / 7, atol=1e-6)


def test_upsample_then_pool_round_trip():
    rng = np.random.default_rng(6)
    x = gaussian_filter(rng.standard_normal((1, 1, 12, 12, 12)), sigma=(0, 0, 3, 3, 3), mode="wrap")
    back = ad.avg_pool3d(ad.upsample_trilinear(x)).data
    inner = (slice(None), slice(None), slice(2, -2), slice(2, -2), slice(2, -2))
    assert np.max(np.abs(back[inner] - x[inner])) < 1e-2


# ------------------------------------------------------------------ backward / grad_check

def test_sum_gradient_is_ones():
    x = _param(np.random.default_rng(8).random((2, 3)))
    (g,) = _grads(lambda: ad.sum_all(x), x)
    assert np.all(g == 1)


def test_leaky_negative_gradient():
    x = _param(-np.random.default_rng(9).uniform(0.1, 1, (3, 4)))
    (g,) = _grads(lambda: ad.sum_all(ad.leaky_relu(x, 0.2)), x)
    assert np.allclose(g, 0.2)


def test_backward_rejects_non_scalar():
    x = _param(np.ones(3))
    g = ad.Graph()
    with g:
        y = ad.scale(x, 2.0)
    with pytest.raises(ValueError):
        ad.backward(g, y)


def test_no_graph_records_nothing():
    g = ad.Graph()
    x = _param(np.ones(3))
    ad.scale(x, 2.0)
    assert g.nodes == []


def test_shared_input_gradients_accumulate():
    x = _param(np.array([1.0, 2.0]))
    (g,) = _grads(lambda: ad.sum_all(ad.add(x, ad.scale(x, 3.0))), x)
    assert np.all(g == 4)


def test_non_finite_output_raises():
    with ad.Graph(), np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            ad.scale(_param(np.array([1e308])), 1e10)


@pytest.mark.parametrize("seed", range(3))
def test_random_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng.standard_normal((1, 2, 4, 4, 4)))
    w = _param(rng.standard_normal((2, 2, 3, 3, 3)) * 0.3)
    gamma, beta = _param(rng.uniform(0.5, 1.5, 2)), _param(rng.standard_normal(2))
    proj = rng.standard_normal((1, 2, 2, 2, 2))

    def fn():
        h = ad.conv3d(x, w)
        h = ad.batch_norm(h, gamma, beta, np.zeros(2), np.ones(2))
        h = ad.leaky_relu(h, 0.2)
        return ad.sum_all(ad.mul(ad.avg_pool3d(h), proj))

    report = {}
    assert ad.grad_check(fn, [x, w, gamma, beta], eps=1e-3, report=report) < 1e-4
    assert report["coords"] == x.data.size + w.data.size + 4
    assert report["skipped"] == 0


def test_grad_check_detects_a_wrong_gradient():
    x = _param(np.array([0.3, 0.7]))

    def bad_square(t):
        return ad.record("bad", (t,), t.data ** 2, lambda g: (g * t.data,))  # missing factor 2

    assert ad.grad_check(lambda: ad.sum_all(bad_square(x)), [x]) > 0.1


def test_grad_check_shrinks_step_across_a_kink():
    x = _param(np.array([2e-4, -0.5]))
    report = {}
    err = ad.grad_check(lambda: ad.sum_all(ad.leaky_relu(x, 0.2)), [x], eps=1e-3, report=report)
    assert err < 1e-8
    assert report["shrunk"] == 1
