"""Resampling, colour conversion, PSNR and patch extraction.

Images hold float pixel values in [0, 255]; quantisation to 8 bits only
happens in :func:`write_png`. Network tensors are the same values divided
by :data:`PIXEL_MAX`.
"""

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .tensor import ShapeError

PIXEL_MAX = 255.0

GRAY = "gray"
RGB = "rgb"
YCBCR = "ycbcr"

# BT.601, studio swing: Y in [16, 235], Cb/Cr in [16, 240]
_RGB2YCC = np.array([
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
]) / 255.0
_YCC_OFFSET = np.array([16.0, 128.0, 128.0])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


class ColorspaceError(ValueError):
    pass


@dataclass
class Image:
    data: np.ndarray
    colorspace: str = GRAY

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3 and self.data.shape[2] == 1:
            self.data = self.data[:, :, 0]
        if self.data.ndim == 2:
            if self.colorspace != GRAY:
                raise ColorspaceError(f"single-channel image tagged {self.colorspace!r}")
        elif self.data.ndim != 3 or self.data.shape[2] != 3 or self.colorspace not in (RGB, YCBCR):
            raise ColorspaceError(f"unsupported image of shape {self.data.shape} as {self.colorspace!r}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return 1 if self.data.ndim == 2 else 3

    def clamped(self):
        return Image(np.clip(self.data, 0.0, PIXEL_MAX), self.colorspace)


def cubic(x, a=-0.5):
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _out_size(size, factor):
    out = int(math.floor(size * factor + 0.5))
    if out < 1:
        raise ShapeError(f"resizing {size} pixels by {factor} gives an empty image")
    return out


def resize_matrix(in_size, out_size, factor, antialias=True):
    """Dense (out_size, in_size) bicubic interpolation matrix.

    Half-pixel-centred coordinates, edge replication at the borders. When
    shrinking with ``antialias`` the kernel is widened by ``1 / factor``.
    """
    if factor < 1 and antialias:
        width = 4.0 / factor

        def kernel(x):
            return factor * cubic(factor * x)
    else:
        width = 4.0
        kernel = cubic
    u = (np.arange(out_size) + 0.5) / factor - 0.5
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1).astype(np.intp)
    mat = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    return mat


def resize_array(arr, factor, axes=(0, 1), antialias=True):
    """Bicubic resize of ``arr`` along two spatial ``axes``; no clamping."""
    arr = np.asarray(arr, dtype=np.float64)
    ah, aw = axes
    h, w = arr.shape[ah], arr.shape[aw]
    mh = resize_matrix(h, _out_size(h, factor), factor, antialias)
    mw = resize_matrix(w, _out_size(w, factor), factor, antialias)
    out = np.moveaxis(np.tensordot(mh, arr, axes=(1, ah)), 0, ah)
    return np.moveaxis(np.tensordot(mw, out, axes=(1, aw)), 0, aw)


def bicubic_resize(img, factor, antialias=True):
    return Image(resize_array(img.data, factor, antialias=antialias), img.colorspace).clamped()


def rgb_to_ycbcr(img):
    if img.colorspace != RGB:
        raise ColorspaceError(f"expected an RGB image, got {img.colorspace!r}")
    return Image(img.data @ _RGB2YCC.T + _YCC_OFFSET, YCBCR).clamped()


def ycbcr_to_rgb(img):
    if img.colorspace != YCBCR:
        raise ColorspaceError(f"expected a YCbCr image, got {img.colorspace!r}")
    return Image((img.data - _YCC_OFFSET) @ _YCC2RGB.T, RGB).clamped()


def luminance(img):
    """Y plane as a 2-d array (grayscale images are returned as-is)."""
    if img.colorspace == GRAY:
        return img.data
    if img.colorspace == RGB:
        img = rgb_to_ycbcr(img)
    return img.data[:, :, 0]


def psnr(a, b, shave=0, peak=PIXEL_MAX):
    """PSNR in dB of two equally sized arrays after shaving a border."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image sizes differ: {a.shape} vs {b.shape}")
    if shave < 0 or 2 * shave >= min(a.shape[:2]):
        raise ValueError(f"shave {shave} too large for {a.shape[:2]}")
    if shave:
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_y(a, b, shave=0):
    return psnr(luminance(a), luminance(b), shave)


def modcrop(img, S):
    if S < 1:
        raise ValueError("scale must be >= 1")
    h = img.height - img.height % S
    w = img.width - img.width % S
    return Image(img.data[:h, :w].copy(), img.colorspace)


@dataclass
class PatchSet:
    """Aligned (input, target) sub-image tensors scaled to [0, 1].

    ``inputs`` is (P, c, f, f); ``targets`` is (P, c, F, F) with F = S*f in
    DAFR mode and F = f in residual mode. ``origins`` are the top-left
    corners in input-image pixels.
    """

    inputs: np.ndarray
    targets: np.ndarray
    origins: list

    def __len__(self):
        return len(self.inputs)

    def __iter__(self):
        return iter(zip(self.inputs, self.targets))

    @classmethod
    def concat(cls, sets, c=1, f=0, F=0):
        sets = [s for s in sets if len(s)]
        if not sets:
            empty_in = np.zeros((0, c, f, f), dtype=np.float32)
            return cls(empty_in, np.zeros((0, c, F, F), dtype=np.float32), [])
        return cls(
            np.concatenate([s.inputs for s in sets]),
            np.concatenate([s.targets for s in sets]),
            [o for s in sets for o in s.origins],
        )


def _planes(img):
    """(c, H, W) array of the image's channels."""
    return img.data[None] if img.data.ndim == 2 else np.moveaxis(img.data, 2, 0)


def grid_count(size, patch, stride):
    return 0 if size < patch else (size - patch) // stride + 1


def extract_patches(lr, hr, cfg, stride, mode="dafr"):
    """Grid-aligned sub-image pairs; partial border patches are dropped.

    In ``"dafr"`` mode ``lr`` is the low-resolution image and each HR patch
    covers the LR patch footprint under factor ``cfg.S``. In ``"residual"``
    mode ``lr`` is the interpolated image, the same size as ``hr``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if mode == "dafr":
        f, S = cfg.f_sub, cfg.S
    elif mode == "residual":
        f, S = cfg.f_sub_R, 1
    else:
        raise ValueError(f"unknown patch mode {mode!r}")
    if (hr.height, hr.width) != (S * lr.height, S * lr.width):
        raise ShapeError(f"HR {hr.height}x{hr.width} is not {S}x LR {lr.height}x{lr.width}")
    src = _planes(lr) / PIXEL_MAX
    dst = _planes(hr) / PIXEL_MAX
    origins = [
        (i * stride, j * stride)
        for i in range(grid_count(lr.height, f, stride))
        for j in range(grid_count(lr.width, f, stride))
    ]
    F = S * f
    inputs = np.empty((len(origins), src.shape[0], f, f), dtype=np.float32)
    targets = np.empty((len(origins), dst.shape[0], F, F), dtype=np.float32)
    for p, (i, j) in enumerate(origins):
        inputs[p] = src[:, i:i + f, j:j + f]
        targets[p] = dst[:, S * i:S * i + F, S * j:S * j + F]
    return PatchSet(inputs, targets, origins)


def read_png(path):
    with PILImage.open(path) as im:
        if im.mode in ("L", "I;16", "I", "F", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            return Image(arr, GRAY)
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return Image(arr, RGB)


def write_png(img, path):
    if img.colorspace == YCBCR:
        img = ycbcr_to_rgb(img)
    arr = np.clip(np.floor(img.data + 0.5), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)
