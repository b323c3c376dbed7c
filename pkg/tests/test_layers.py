import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dafr import layers as L
from dafr.tensor import ShapeError

from oracles import (
    conv_direct,
    deconv_direct,
    numeric_grad,
    rel_error,
    strided_conv_direct,
)


def _conv(rng, o, c, k, dtype=np.float64, bias=True):
    w = rng.normal(size=(o, c, k, k)).astype(dtype)
    b = rng.normal(size=o).astype(dtype) if bias else np.zeros(o, dtype)
    return L.ConvLayer(w, b)


def _deconv(rng, ci, co, s, k=9, dtype=np.float64, bias=True):
    w = rng.normal(size=(ci, co, k, k)).astype(dtype)
    b = rng.normal(size=co).astype(dtype) if bias else np.zeros(co, dtype)
    return L.DeconvLayer(w, b, s)


# --- convolution -----------------------------------------------------------

def test_conv_identity_kernel():
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    layer = L.ConvLayer(w, np.zeros(1, np.float32))
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 6)).astype(np.float32)
    assert np.array_equal(L.conv_forward(layer, x), x)


def test_conv_bias_only():
    layer = L.ConvLayer(np.zeros((2, 3, 5, 5)), np.array([1.5, -2.0]))
    out = L.conv_forward(layer, np.ones((1, 3, 4, 4)))
    assert np.all(out[:, 0] == 1.5) and np.all(out[:, 1] == -2.0)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
    layer = _conv(rng, 3, 2, 3, np.float32)
    expected = conv_direct(x, layer.weight, layer.bias)
    assert np.max(np.abs(L.conv_forward(layer, x) - expected)) < 1e-5


def test_conv_channel_mismatch():
    layer = _conv(np.random.default_rng(0), 2, 3, 3)
    with pytest.raises(ShapeError):
        L.conv_forward(layer, np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        L.conv_backward(layer, np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 4, 5)))
    with pytest.raises(ShapeError):
        L.ConvLayer(np.zeros((2, 3, 4, 4)), np.zeros(2))


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(2)
    layer = _conv(rng, 2, 3, 5)
    x = rng.normal(size=(2, 3, 6, 6))
    gx, gw, gb = L.conv_backward(layer, x, np.zeros((2, 2, 6, 6)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_bias_grad_sums_ones():
    layer = _conv(np.random.default_rng(3), 1, 1, 3)
    _, _, gb = L.conv_backward(layer, np.ones((1, 1, 4, 4)), np.ones((1, 1, 4, 4)))
    assert gb.tolist() == [16.0]


@pytest.mark.parametrize("k", [3, 5])
def test_conv_backward_finite_differences(k):
    rng = np.random.default_rng(4 + k)
    layer = _conv(rng, 2, 3, k)
    x = rng.normal(size=(2, 3, 6, 6))
    g = rng.normal(size=(2, 2, 6, 6))

    def f():
        return float(np.sum(L.conv_forward(layer, x) * g))

    gx, gw, gb = L.conv_backward(layer, x, g)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gw, numeric_grad(f, layer.params["weight"])) < 1e-4
    assert rel_error(gb, numeric_grad(f, layer.params["bias"])) < 1e-4


@settings(max_examples=25, deadline=None)
@given(
    k=st.sampled_from([3, 5]), h=st.integers(1, 9), w=st.integers(1, 9),
    c=st.integers(1, 3), o=st.integers(1, 3), seed=st.integers(0, 2**16),
)
def test_conv_preserves_spatial_size(k, h, w, c, o, seed):
    rng = np.random.default_rng(seed)
    out = L.conv_forward(_conv(rng, o, c, k), rng.normal(size=(1, c, h, w)))
    assert out.shape == (1, o, h, w)


def test_conv_linearity():
    rng = np.random.default_rng(5)
    layer = _conv(rng, 3, 2, 3, np.float32, bias=False)
    x1 = rng.normal(size=(1, 2, 7, 7)).astype(np.float32)
    x2 = rng.normal(size=(1, 2, 7, 7)).astype(np.float32)
    lhs = L.conv_forward(layer, 0.3 * x1 - 1.7 * x2)
    rhs = 0.3 * L.conv_forward(layer, x1) - 1.7 * L.conv_forward(layer, x2)
    assert np.max(np.abs(lhs - rhs)) < 1e-5


def test_conv_adjoint():
    rng = np.random.default_rng(6)
    layer = _conv(rng, 3, 2, 5, bias=False)
    x = rng.normal(size=(2, 2, 6, 5))
    g = rng.normal(size=(2, 3, 6, 5))
    gx, _, _ = L.conv_backward(layer, x, g)
    lhs, rhs = np.sum(L.conv_forward(layer, x) * g), np.sum(x * gx)
    assert abs(lhs - rhs) / abs(lhs) < 1e-5


# --- PReLU ------------------------------------------------------------------

def test_prelu_branches():
    layer = L.PReLULayer(np.array([0.25]))
    assert L.prelu_forward(layer, np.full((1, 1, 1, 1), 2.0)).item() == 2.0
    assert L.prelu_forward(layer, np.full((1, 1, 1, 1), -1.0)).item() == -0.25


def test_prelu_slope_one_is_identity():
    x = np.random.default_rng(7).normal(size=(2, 3, 4, 4))
    assert np.array_equal(L.prelu_forward(L.PReLULayer(np.ones(3)), x), x)


def test_prelu_backward_examples():
    layer = L.PReLULayer(np.array([0.4]))
    x = np.abs(np.random.default_rng(8).normal(size=(1, 1, 3, 3))) + 0.1
    _, ga = L.prelu_backward(layer, x, np.ones_like(x))
    assert ga.tolist() == [0.0]
    gx, ga = L.prelu_backward(layer, np.full((1, 1, 1, 1), -2.0), np.ones((1, 1, 1, 1)))
    assert gx.item() == pytest.approx(0.4) and ga.tolist() == [-2.0]


def test_prelu_shape_errors():
    layer = L.PReLULayer(np.ones(3))
    with pytest.raises(ShapeError):
        L.prelu_forward(layer, np.zeros((1, 2, 2, 2)))
    with pytest.raises(ShapeError):
        L.prelu_backward(layer, np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 3)))


def test_prelu_finite_differences():
    rng = np.random.default_rng(9)
    layer = L.PReLULayer(rng.uniform(0.05, 0.5, 3))
    x = rng.normal(size=(2, 3, 6, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    g = rng.normal(size=x.shape)

    def f():
        return float(np.sum(L.prelu_forward(layer, x) * g))

    gx, ga = L.prelu_backward(layer, x, g)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(ga, numeric_grad(f, layer.params["a"])) < 1e-4


# --- transposed convolution ---------------------------------------------------

def test_deconv_stride1_impulse_is_identity():
    w = np.zeros((1, 1, 9, 9))
    w[0, 0, 4, 4] = 1.0
    layer = L.DeconvLayer(w, np.zeros(1), 1)
    x = np.random.default_rng(10).normal(size=(1, 1, 5, 7))
    assert np.array_equal(L.deconv_forward(layer, x), x)


def test_deconv_output_size():
    layer = _deconv(np.random.default_rng(11), 65, 1, 2, dtype=np.float32)
    assert L.deconv_forward(layer, np.zeros((1, 65, 8, 8), np.float32)).shape == (1, 1, 16, 16)


def test_deconv_matches_scatter_loops():
    rng = np.random.default_rng(12)
    layer = _deconv(rng, 2, 1, 3, dtype=np.float32)
    x = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
    expected = deconv_direct(x, layer.weight, layer.bias, 3)
    assert np.max(np.abs(L.deconv_forward(layer, x) - expected)) < 1e-5


def test_deconv_errors():
    layer = _deconv(np.random.default_rng(13), 3, 1, 2)
    with pytest.raises(ShapeError):
        L.deconv_forward(layer, np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        L.deconv_backward(layer, np.zeros((1, 3, 4, 4)), np.zeros((1, 1, 8, 9)))
    with pytest.raises(ValueError):
        L.DeconvLayer(np.zeros((3, 1, 9, 9)), np.zeros(1), 0)


def test_deconv_backward_zero_upstream():
    rng = np.random.default_rng(14)
    layer = _deconv(rng, 3, 2, 2)
    gx, gw, gb = L.deconv_backward(layer, rng.normal(size=(1, 3, 4, 4)), np.zeros((1, 2, 8, 8)))
    assert not gx.any() and not gw.any() and not gb.any()


@pytest.mark.parametrize("s", [2, 3, 4])
def test_deconv_input_grad_is_strided_conv(s):
    rng = np.random.default_rng(15 + s)
    layer = _deconv(rng, 2, 2, s)
    x = rng.normal(size=(1, 2, 3, 4))
    g = rng.normal(size=(1, 2, 3 * s, 4 * s))
    gx, _, _ = L.deconv_backward(layer, x, g)
    assert np.max(np.abs(gx - strided_conv_direct(g, layer.weight, s))) < 1e-9


@pytest.mark.parametrize("s", [1, 2, 3, 4])
def test_deconv_backward_finite_differences(s):
    rng = np.random.default_rng(20 + s)
    layer = _deconv(rng, 3, 2, s)
    x = rng.normal(size=(2, 3, 3, 3))
    g = rng.normal(size=(2, 2, 3 * s, 3 * s))

    def f():
        return float(np.sum(L.deconv_forward(layer, x) * g))

    gx, gw, gb = L.deconv_backward(layer, x, g)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gw, numeric_grad(f, layer.params["weight"])) < 1e-4
    assert rel_error(gb, numeric_grad(f, layer.params["bias"])) < 1e-4


def test_deconv_adjoint():
    rng = np.random.default_rng(30)
    layer = _deconv(rng, 3, 2, 3, bias=False)
    x = rng.normal(size=(2, 3, 4, 5))
    g = rng.normal(size=(2, 2, 12, 15))
    gx, _, _ = L.deconv_backward(layer, x, g)
    lhs, rhs = np.sum(L.deconv_forward(layer, x) * g), np.sum(x * gx)
    assert abs(lhs - rhs) / abs(lhs) < 1e-5


@pytest.mark.parametrize("s", [1, 2, 3, 4])
def test_bilinear_kernel_partition_of_unity(s):
    k = L.bilinear_kernel(s)
    # each output phase receives weights summing to one
    for phase in range(s):
        assert k[phase::s].sum() == pytest.approx(1.0)
