"""Datasets: folders of HR images and a seeded synthetic generator."""

import logging
from pathlib import Path

import numpy as np

from .imaging import GRAY, PIXEL_MAX, Image, read_png

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


class DatasetError(ValueError):
    pass


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y, x


def _direction(rng, y, x):
    theta = rng.uniform(0, np.pi)
    return np.cos(theta) * x + np.sin(theta) * y


def _gradient(rng, y, x, size):
    return rng.uniform(-1, 1) * _direction(rng, y, x) / size


def _soft_edges(rng, y, x, size):
    out = np.zeros_like(x)
    for _ in range(rng.integers(1, 4)):
        t = _direction(rng, y, x)
        offset = rng.uniform(t.min(), t.max())
        out += rng.uniform(-1, 1) * np.tanh((t - offset) / rng.uniform(*EDGE_WIDTH))
    return out


def _gratings(rng, y, x, size):
    out = np.zeros_like(x)
    for _ in range(rng.integers(1, 4)):
        period = rng.uniform(MIN_PERIOD, MAX_PERIOD)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.3, 1) * np.sin(2 * np.pi * _direction(rng, y, x) / period + phase)
    return out


def _soft_disks(rng, y, x, size):
    out = np.zeros_like(x)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.1, 0.9, 2) * size
        r = rng.uniform(0.05, 0.3) * size
        dist = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
        out += rng.uniform(-1, 1) * 0.5 * (1 + np.tanh((r - dist) / rng.uniform(*EDGE_WIDTH)))
    return out


# fine gratings and soft edges: bicubic interpolation blurs them in a way
# that a small network can learn to undo
MIN_PERIOD = 6.0
MAX_PERIOD = 16.0
EDGE_WIDTH = (0.4, 1.2)
_PATTERNS = (_gradient, _soft_edges, _gratings, _soft_disks)


def synthetic_image(rng, size):
    """A grayscale image mixing smooth gradients, soft edges, gratings and disks."""
    y, x = _grid(size)
    out = np.zeros((size, size))
    for fn in _PATTERNS:
        if rng.random() < 0.75:
            out += fn(rng, y, x, size)
    lo, hi = out.min(), out.max()
    if hi - lo < 1e-9:
        out = np.full_like(out, 0.5)
    else:
        out = (out - lo) / (hi - lo)
    contrast = rng.uniform(0.6, 0.9)
    base = rng.uniform(0.05, 1 - contrast - 0.05)
    return Image(PIXEL_MAX * (base + contrast * out), GRAY)


def synthetic_dataset(count, size=96, seed=0):
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size) for _ in range(count)]


def load_folder(path):
    """HR images in a directory, sorted by file name; unreadable files are skipped."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{path} is not a directory")
    images, names = [], []
    for p in sorted(root.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            images.append(read_png(p))
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", p, exc)
            continue
        names.append(p.name)
    return images, names
