"""Forward and backward passes for the layer types of the network.

Convolutions are stride 1 with zero padding (k - 1) / 2, so spatial size
is preserved. The transposed convolution scatters each input pixel's
kernel at stride S and then crops the full output to exactly S*H x S*W.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError


class Layer:
    """Parameter holder shared by all layer kinds.

    ``grads`` is filled by a backward pass and cleared by the optimizer;
    ``velocity`` holds momentum buffers. ``decayed`` names the parameters
    subject to weight decay.
    """

    kind = "layer"
    group = "conv"
    decayed = ()

    def __init__(self, **params):
        self.params = params
        self.grads = {}
        self.velocity = {}

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.grads = {}
        new.velocity = {}
        return new

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.grads = {}
        self.velocity = {}
        return self


class ConvLayer(Layer):
    kind = "conv"
    decayed = ("weight",)

    def __init__(self, weight, bias):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
            raise ShapeError(f"conv kernel must be (O, C, k, k) with odd k, got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} filters")
        super().__init__(weight=weight, bias=bias)

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def bias(self):
        return self.params["bias"]

    @property
    def k(self):
        return self.weight.shape[2]

    @property
    def pad(self):
        return (self.k - 1) // 2

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]


class PReLULayer(Layer):
    kind = "prelu"

    def __init__(self, a):
        a = np.asarray(a)
        if a.ndim != 1:
            raise ShapeError("PReLU coefficients must be a vector")
        super().__init__(a=a)

    @property
    def a(self):
        return self.params["a"]


class DeconvLayer(Layer):
    kind = "deconv"
    group = "deconv"
    decayed = ("weight",)

    def __init__(self, weight, bias, stride):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ShapeError(f"deconv kernel must be (C_in, C_out, K, K), got {weight.shape}")
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
        if int(stride) < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if int(stride) > weight.shape[2]:
            raise ValueError(f"stride {stride} exceeds kernel size {weight.shape[2]}")
        super().__init__(weight=weight, bias=bias)
        self.stride = int(stride)

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def bias(self):
        return self.params["bias"]

    @property
    def k(self):
        return self.weight.shape[2]

    @property
    def crop(self):
        return (self.k - self.stride) // 2


def _im2col(xp, k, h, w):
    """Padded (N, C, h+k-1, w+k-1) input -> (C*k*k, N*h*w) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, h, w), dtype=xp.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, u, v] = xp[:, :, u:u + h, v:v + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def _pad(x, p):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    return xp


def _conv(x, weight, pad):
    n, _, h, w = x.shape
    o, _, k, _ = weight.shape
    cols = _im2col(_pad(x, pad), k, h, w)
    out = weight.reshape(o, -1) @ cols
    return out.reshape(o, n, h, w).transpose(1, 0, 2, 3)


def conv_forward(layer, x):
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"conv expects {layer.in_channels} input channels, got shape {x.shape}")
    out = _conv(x, layer.weight, layer.pad)
    out += layer.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv_backward(layer, x, grad_out, need_input_grad=True):
    """Return ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None if not requested."""
    n, _, h, w = x.shape
    if grad_out.shape != (n, layer.out_channels, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output")
    cols = _im2col(_pad(x, layer.pad), layer.k, h, w)
    g = grad_out.transpose(1, 0, 2, 3).reshape(layer.out_channels, n * h * w)
    grad_w = (g @ cols.T).reshape(layer.weight.shape)
    grad_b = g.sum(axis=1)
    grad_x = None
    if need_input_grad:
        # adjoint of a same-padded odd-kernel conv: flipped, channel-swapped kernel
        flipped = layer.weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        grad_x = _conv(grad_out, flipped, layer.pad)
        grad_x = np.ascontiguousarray(grad_x)
    return grad_x, grad_w, grad_b


def prelu_forward(layer, x):
    if x.ndim != 4 or x.shape[1] != layer.a.shape[0]:
        raise ShapeError(f"PReLU has {layer.a.shape[0]} coefficients, input shape {x.shape}")
    a = layer.a[None, :, None, None]
    return np.where(x > 0, x, a * x)


def prelu_backward(layer, x, grad_out):
    if grad_out.shape != x.shape or x.shape[1] != layer.a.shape[0]:
        raise ShapeError(f"PReLU backward shape mismatch {x.shape} vs {grad_out.shape}")
    a = layer.a[None, :, None, None]
    pos = x > 0
    grad_x = np.where(pos, grad_out, a * grad_out)
    grad_a = (grad_out * np.where(pos, 0, x)).sum(axis=(0, 2, 3))
    return grad_x, grad_a


def _full_size(layer, h):
    return layer.stride * (h - 1) + layer.k


def deconv_forward(layer, x):
    ci, co, k, _ = layer.weight.shape
    if x.ndim != 4 or x.shape[1] != ci:
        raise ShapeError(f"deconv expects {ci} input channels, got shape {x.shape}")
    n, _, h, w = x.shape
    s = layer.stride
    xm = x.transpose(0, 2, 3, 1).reshape(n * h * w, ci)
    cols = (xm @ layer.weight.reshape(ci, co * k * k)).reshape(n, h, w, co, k, k)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # (n, co, k, k, h, w)
    full = np.zeros((n, co, _full_size(layer, h), _full_size(layer, w)), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            full[:, :, u:u + s * (h - 1) + 1:s, v:v + s * (w - 1) + 1:s] += cols[:, :, u, v]
    c = layer.crop
    out = full[:, :, c:c + s * h, c:c + s * w] + layer.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def deconv_backward(layer, x, grad_out, need_input_grad=True):
    ci, co, k, _ = layer.weight.shape
    n, _, h, w = x.shape
    s = layer.stride
    if grad_out.shape != (n, co, s * h, s * w):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match deconv output")
    c = layer.crop
    gfull = np.zeros((n, co, _full_size(layer, h), _full_size(layer, w)), dtype=grad_out.dtype)
    gfull[:, :, c:c + s * h, c:c + s * w] = grad_out
    win = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, co * k * k)
    xm = x.transpose(0, 2, 3, 1).reshape(n * h * w, ci)
    grad_w = (xm.T @ gcols).reshape(layer.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        grad_x = (gcols @ layer.weight.reshape(ci, -1).T).reshape(n, h, w, ci)
        grad_x = np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2))
    return grad_x, grad_w, grad_b


def bilinear_kernel(stride, size=9):
    """1-d bilinear upsampling taps for ``stride``, aligned to the deconv crop.

    With crop offset ``(size - stride) // 2`` the resulting transposed
    convolution is a half-pixel-centred bilinear interpolator.
    """
    center = (size - stride) // 2 + (stride - 1) / 2.0
    t = np.arange(size, dtype=np.float64)
    return np.maximum(0.0, 1.0 - np.abs(t - center) / stride)
