"""NCHW array helpers.

A tensor here is a plain 4-d :class:`numpy.ndarray` laid out as
(batch, channels, height, width). float32 is the working precision;
float64 is used for finite-difference gradient checks.
"""

import numpy as np

DEFAULT_DTYPE = np.float32
Tensor = np.ndarray

_INDEX_MAX = np.iinfo(np.intp).max


class ShapeError(ValueError):
    pass


class SizeError(ValueError):
    pass


def new_tensor(shape, fill=0.0, dtype=DEFAULT_DTYPE):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a rank-4 shape, got {shape}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative dimension in {shape}")
    count = 1
    for s in shape:
        count *= s
    if count * np.dtype(dtype).itemsize > _INDEX_MAX:
        raise SizeError(f"tensor of shape {shape} exceeds addressable size")
    return np.full(shape, fill, dtype=dtype)


def _check_finite(out):
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("operation produced non-finite values")
    return out


def elementwise(op, a, b=None, hi=None):
    """Apply ``op`` in {add, sub, mul, scale, clamp} elementwise.

    ``add``/``sub``/``mul`` take two equally shaped arrays. ``scale``
    takes a scalar ``b``. ``clamp`` takes bounds ``b`` (low) and ``hi``.
    """
    a = np.asarray(a)
    if op in ("add", "sub", "mul"):
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        fn = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op]
        return _check_finite(fn(a, b))
    if op == "scale":
        with np.errstate(over="ignore", invalid="ignore"):
            out = a * a.dtype.type(b)
        return _check_finite(out)
    if op == "clamp":
        return _check_finite(np.clip(a, b, hi).astype(a.dtype, copy=False))
    raise ValueError(f"unknown elementwise op {op!r}")


def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects rank-4 tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(x, first):
    """Inverse of :func:`concat_channels`: split after ``first`` channels."""
    if not 0 <= first <= x.shape[1]:
        raise ShapeError(f"split point {first} outside 0..{x.shape[1]}")
    return x[:, :first].copy(), x[:, first:].copy()
