"""Network assembly, weight transfer, parameter accounting and checkpoints."""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .tensor import DEFAULT_DTYPE, ShapeError, concat_channels

FEATURES = 64
DECONV_SIZE = 9
INIT_STD = 0.001
PRELU_INIT = 0.25

# "gaussian": N(0, init_std^2) everywhere.
# "msra": sqrt(2 / fan_in) for layers followed by a PReLU, init_std elsewhere.
# "msra_dcfree": as "msra", with first-layer filters shifted to zero mean so
#   the features ignore local brightness.
INIT_SCHEMES = ("gaussian", "msra", "msra_dcfree")

DAFR = "dafr"
RESIDUAL = "residual"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    n: int = 20
    m: int = 8
    c: int = 1
    S: int = 2
    f_sub: int = 16
    f_sub_R: int = 32
    init_std: float = INIT_STD
    init: str = "gaussian"

    def validate(self):
        if self.n < 1 or self.m < 1 or self.c < 1:
            raise ConfigError(f"n, m, c must be >= 1: {self}")
        if self.S < 2:
            raise ConfigError(f"scale factor must be >= 2, got {self.S}")
        if self.S > DECONV_SIZE:
            raise ConfigError(f"scale factor {self.S} exceeds the {DECONV_SIZE}x{DECONV_SIZE} deconv support")
        if self.f_sub < 9 or self.f_sub_R < 9:
            raise ConfigError(f"sub-image sizes must be >= 9: {self}")
        if not self.init_std > 0:
            raise ConfigError("init_std must be positive")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init!r}")
        return self


class Model:
    """Ordered layer list plus the config and kind it was built for.

    DAFR:     [conv, prelu] * (n + 2), deconv   (deconv sees features + input)
    Residual: [conv, prelu] * (n + 2), conv     (output added to the input)
    """

    def __init__(self, kind, config, layers, dtype=DEFAULT_DTYPE):
        self.kind = kind
        self.config = config
        self.layers = layers
        self.dtype = np.dtype(dtype)

    @property
    def stack(self):
        """The shared (n + 2) conv/PReLU pairs, as a flat list."""
        return self.layers[: 2 * (self.config.n + 2)]

    @property
    def head(self):
        return self.layers[-1]

    @property
    def convs(self):
        return [layer for layer in self.layers if layer.kind == "conv"]

    @property
    def scale(self):
        return self.head.stride if self.kind == DAFR else 1

    def copy(self):
        return Model(self.kind, self.config, [layer.copy() for layer in self.layers], self.dtype)

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self


def _init_weight(cfg, rng, shape, dtype, rectified=True):
    """Zero-mean Gaussian with the std of the configured scheme."""
    std = cfg.init_std
    if cfg.init != "gaussian" and rectified:
        std = np.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
    return rng.normal(0.0, std, size=shape).astype(dtype)


def _stack(cfg, rng, dtype):
    shapes = [(FEATURES, cfg.c, 5, 5), (cfg.m, FEATURES, 3, 3)]
    shapes += [(cfg.m, cfg.m, 3, 3)] * (cfg.n - 1)
    shapes += [(FEATURES, cfg.m, 5, 5)]
    out = []
    for i, shape in enumerate(shapes):
        w = _init_weight(cfg, rng, shape, dtype)
        if i == 0 and cfg.init == "msra_dcfree":
            w -= w.mean(axis=(1, 2, 3), keepdims=True)
        out.append(L.ConvLayer(w, np.zeros(shape[0], dtype=dtype)))
        out.append(L.PReLULayer(np.full(shape[0], PRELU_INIT, dtype=dtype)))
    return out


def make_deconv(cfg, stride, dtype=DEFAULT_DTYPE):
    """Bilinear on the skip slice, zero on the feature slices, zero bias."""
    weight = np.zeros((FEATURES + cfg.c, cfg.c, DECONV_SIZE, DECONV_SIZE), dtype=np.float64)
    k = L.bilinear_kernel(stride, DECONV_SIZE)
    for j in range(cfg.c):
        weight[FEATURES + j, j] = np.outer(k, k)
    return L.DeconvLayer(weight.astype(dtype), np.zeros(cfg.c, dtype=dtype), stride)


def build_dafr(cfg, seed, dtype=DEFAULT_DTYPE):
    cfg.validate()
    rng = np.random.default_rng(seed)
    layers = _stack(cfg, rng, dtype) + [make_deconv(cfg, cfg.S, dtype)]
    return Model(DAFR, cfg, layers, dtype)


def build_residual_net(cfg, seed, dtype=DEFAULT_DTYPE):
    cfg.validate()
    rng = np.random.default_rng(seed)
    layers = _stack(cfg, rng, dtype)
    shape = (cfg.c, FEATURES, 3, 3)
    w = _init_weight(cfg, rng, shape, dtype, rectified=False)
    layers.append(L.ConvLayer(w, np.zeros(cfg.c, dtype=dtype)))
    return Model(RESIDUAL, cfg, layers, dtype)


def transfer_weights(src, dst):
    """Copy the (n + 2) conv/PReLU pairs of ``src`` into ``dst``."""
    a, b = src.config, dst.config
    if (a.n, a.m, a.c) != (b.n, b.m, b.c):
        raise ConfigError(f"cannot transfer between n,m,c={a.n, a.m, a.c} and {b.n, b.m, b.c}")
    for i, layer in enumerate(src.stack):
        dst.layers[i] = layer.copy().astype(dst.dtype)


def _run_stack(model, x, acts):
    h = x
    for layer in model.stack:
        acts.append(h)
        h = L.conv_forward(layer, h) if layer.kind == "conv" else L.prelu_forward(layer, h)
    return h


def forward(model, x):
    """Return ``(y, acts)`` where ``acts[i]`` is the input seen by ``layers[i]``."""
    if x.ndim != 4 or x.shape[1] != model.config.c:
        raise ShapeError(f"model expects {model.config.c} channels, got shape {x.shape}")
    x = x.astype(model.dtype, copy=False)
    acts = []
    feats = _run_stack(model, x, acts)
    if model.kind == DAFR:
        z = concat_channels(feats, x)
        acts.append(z)
        y = L.deconv_forward(model.head, z)
    else:
        acts.append(feats)
        y = x + L.conv_forward(model.head, feats)
    return y, acts


def features(model, x):
    """Output of the shared conv stack."""
    return _run_stack(model, x.astype(model.dtype, copy=False), [])


def backward(model, acts, grad_y, groups=("conv", "deconv")):
    """Populate ``layer.grads`` for every layer whose group is in ``groups``."""
    head = model.head
    train_stack = "conv" in groups
    if model.kind == DAFR:
        gz, gw, gb = L.deconv_backward(head, acts[-1], grad_y, need_input_grad=train_stack)
    else:
        gz, gw, gb = L.conv_backward(head, acts[-1], grad_y, need_input_grad=train_stack)
    if head.group in groups:
        head.grads = {"weight": gw, "bias": gb}
    if not train_stack:
        return
    g = gz[:, :FEATURES] if model.kind == DAFR else gz
    stack = model.stack
    for i in range(len(stack) - 1, -1, -1):
        layer = stack[i]
        if layer.kind == "conv":
            g, gw, gb = L.conv_backward(layer, acts[i], g, need_input_grad=i > 0)
            layer.grads = {"weight": gw, "bias": gb}
        else:
            g, ga = L.prelu_backward(layer, acts[i], g)
            layer.grads = {"a": ga}


def param_count_paper(n, m):
    """Weight count of the published accounting (skip slice, biases, PReLU excluded)."""
    return 6784 + 2176 * m + (n - 1) * 9 * m * m


def param_count_exact(model):
    cfg = model.config
    weights = biases = prelu = 0
    for layer in model.layers:
        if layer.kind == "prelu":
            prelu += layer.a.size
        else:
            weights += layer.weight.size
            biases += layer.bias.size
    skip = cfg.c * cfg.c * DECONV_SIZE * DECONV_SIZE if model.kind == DAFR else 0
    paper = param_count_paper(cfg.n, cfg.m)
    return {
        "paper": paper,
        "weights": weights,
        "weights_excluding_skip": weights - skip,
        "skip_slice": skip,
        "biases": biases,
        "prelu": prelu,
        "total": weights + biases + prelu,
        "weight_delta": weights - paper,
    }


MAGIC = b"DAFRCKPT"
VERSION = 1


def save_checkpoint(model, path, seed=None, step=0):
    meta = {"kind": model.kind, "precision": model.dtype.name, "seed": seed, "step": int(step)}
    meta.update(asdict(model.config))
    meta["S"] = model.scale if model.kind == DAFR else model.config.S
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for layer in model.layers:
        for name in ("weight", "bias", "a"):
            if name in layer.params:
                arr = np.ascontiguousarray(layer.params[name], dtype="<f4").ravel()
                parts.append(struct.pack("<Q", arr.size))
                parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Return ``(model, metadata)``; raises :class:`CheckpointError` on bad input."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        version, size = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        meta = json.loads(data[16:16 + size].decode("utf-8"))
        fields = {k: meta[k] for k in NetworkConfig.__dataclass_fields__}
        cfg = NetworkConfig(**fields)
        dtype = np.dtype(meta["precision"])
        build = build_dafr if meta["kind"] == DAFR else build_residual_net
        model = build(cfg, 0, dtype)
        offset = 16 + size
        for layer in model.layers:
            for name in ("weight", "bias", "a"):
                if name not in layer.params:
                    continue
                (count,) = struct.unpack_from("<Q", data, offset)
                offset += 8
                ref = layer.params[name]
                if count != ref.size:
                    raise CheckpointError(f"{path}: array size {count}, expected {ref.size}")
                arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
                offset += 4 * count
                layer.params[name] = arr.reshape(ref.shape).astype(dtype)
    except (struct.error, KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return model, meta
