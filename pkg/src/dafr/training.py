"""Two-step training, deconvolution fine-tuning for new scales, and inference.

Step 1 trains the residual network on (interpolated patch, residual patch)
pairs with a decaying learning rate. Step 2 copies its conv stack into a
DAFR model and trains against ground-truth HR patches. A trained DAFR can be
moved to another scale factor by rebuilding and training only its deconv.
"""

import configparser
import csv
import io
import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import model as M
from .data import DatasetError, load_folder, synthetic_dataset
from .imaging import (
    GRAY,
    PIXEL_MAX,
    RGB,
    YCBCR,
    Image,
    PatchSet,
    bicubic_resize,
    extract_patches,
    grid_count,
    luminance,
    modcrop,
    psnr_y,
    rgb_to_ycbcr,
    ycbcr_to_rgb,
)
from .optim import LossConfig, OptimConfig, charbonnier_loss, lr_at, sgd_step
from .tensor import ShapeError

log = logging.getLogger(__name__)

STEP1 = "step1"
STEP2 = "step2"
FINETUNE = "finetune"
PHASES = (STEP1, STEP2, FINETUNE)

# fixed step-2 rates
STEP2_LR_CONV = 1e-5
STEP2_LR_DECONV = 1e-4

# patch strides when the plan leaves them open: LR pixels for DAFR pairs,
# HR pixels for residual pairs
STRIDE_DAFR = 14
STRIDE_RESIDUAL = 28


@dataclass(frozen=True)
class Record:
    step: int
    epoch: int
    lr_conv: float
    lr_deconv: float | None
    loss: float
    val_psnr: float | None = None


CSV_FIELDS = ("step", "epoch", "lr_conv", "lr_deconv", "loss", "val_psnr")


def _fmt(value):
    return "" if value is None else repr(value)


@dataclass
class TrainReport:
    """Per-iteration training log. ``epoch_seconds`` is kept in memory only,
    so the CSV form is reproducible across runs."""

    phase: str
    records: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def log(self, record):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"step {record.step} does not follow {self.records[-1].step}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self):
        return np.array([r.loss for r in self.records])

    def epoch_losses(self):
        """Mean recorded loss of each epoch, in epoch order."""
        by_epoch = {}
        for r in self.records:
            by_epoch.setdefault(r.epoch, []).append(r.loss)
        return np.array([np.mean(v) for _, v in sorted(by_epoch.items())])

    def iterations_to(self, threshold, window=1):
        """Iterations until the trailing ``window``-mean loss is <= threshold."""
        losses = self.losses
        if len(losses) < window:
            return None
        means = np.convolve(losses, np.ones(window) / window, mode="valid")
        hits = np.flatnonzero(means <= threshold)
        return None if hits.size == 0 else int(hits[0]) + window

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.records:
            writer.writerow([_fmt(getattr(r, name)) for name in CSV_FIELDS])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path, phase=""):
        report = cls(phase)
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                report.log(Record(
                    int(row["step"]), int(row["epoch"]), float(row["lr_conv"]),
                    float(row["lr_deconv"]) if row["lr_deconv"] else None,
                    float(row["loss"]),
                    float(row["val_psnr"]) if row["val_psnr"] else None,
                ))
        return report


@dataclass(frozen=True)
class TrainPlan:
    """Everything a training phase needs.

    Without ``dataset`` a seeded synthetic set of ``synthetic_count`` images
    is generated. Training stops once the epoch loss (the validation loss
    when a validation folder is given) has not improved by more than
    ``min_improvement`` for ``patience`` epochs, at ``max_epochs``, or after
    ``max_iterations`` updates.
    """

    phase: str = STEP1
    network: M.NetworkConfig = M.NetworkConfig()
    optim: OptimConfig = OptimConfig()
    loss: LossConfig = LossConfig()
    seed: int = 0
    dataset: str | None = None
    validation: str | None = None
    synthetic_count: int = 16
    synthetic_size: int = 96
    stride: int | None = None
    max_epochs: int = 80
    max_iterations: int | None = None
    patience: int = 5
    min_improvement: float = 0.001

    def validate(self):
        if self.phase not in PHASES:
            raise M.ConfigError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        self.network.validate()
        if self.max_epochs < 1 or self.patience < 1:
            raise M.ConfigError("max_epochs and patience must be >= 1")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise M.ConfigError("max_iterations must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise M.ConfigError("stride must be >= 1")
        if self.synthetic_count < 1 or self.synthetic_size < 1:
            raise M.ConfigError("synthetic_count and synthetic_size must be >= 1")
        if self.phase == STEP2 and (self.optim.lr_conv, self.optim.lr_deconv) != (
            STEP2_LR_CONV, STEP2_LR_DECONV,
        ):
            raise M.ConfigError(
                f"step 2 runs at conv {STEP2_LR_CONV:g} / deconv {STEP2_LR_DECONV:g}, "
                f"got {self.optim.lr_conv:g} / {self.optim.lr_deconv:g}"
            )
        return self


# --- plan files ---------------------------------------------------------------

_SECTIONS = {"network": M.NetworkConfig, "optim": OptimConfig, "loss": LossConfig}


def _coerce(cls, name, text):
    kind = {f.name: f.type for f in fields(cls)}[name]
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if text.strip().lower() in ("", "none"):
        return None
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text.strip()


def parse_plan(text):
    """Build a :class:`TrainPlan` from INI text.

    ``[plan]`` holds the top-level fields; ``[network]``, ``[optim]`` and
    ``[loss]`` override the matching config defaults.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys such as S and f_sub_R are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise M.ConfigError(f"unreadable plan: {exc}") from exc
    known = {"plan", *_SECTIONS}
    extra = set(parser.sections()) - known
    if extra:
        raise M.ConfigError(f"unknown plan sections: {sorted(extra)}")
    kwargs = {}
    try:
        for section, cls in _SECTIONS.items():
            if parser.has_section(section):
                values = {k: _coerce(cls, k, v) for k, v in parser.items(section)}
                kwargs[section] = cls(**values)
        if parser.has_section("plan"):
            for k, v in parser.items("plan"):
                kwargs[k] = _coerce(TrainPlan, k, v)
        return TrainPlan(**kwargs).validate()
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, M.ConfigError):
            raise
        raise M.ConfigError(f"bad plan value: {exc}") from exc


def load_plan(path):
    with open(path, encoding="utf-8") as fh:
        return parse_plan(fh.read())


def plan_dict(plan):
    """JSON-friendly echo of a plan, used for run manifests."""
    out = {f.name: getattr(plan, f.name) for f in fields(plan) if f.name not in _SECTIONS}
    for section in _SECTIONS:
        cfg = getattr(plan, section)
        out[section] = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    return out


# --- data -----------------------------------------------------------------------

def _as_channels(img, c):
    if c == 1:
        return img if img.colorspace == GRAY else Image(luminance(img), GRAY)
    if img.channels != c:
        raise DatasetError(f"model expects {c} channels, image has {img.channels}")
    return img


def training_images(plan):
    """HR images for ``plan``: the dataset folder, or a seeded synthetic set."""
    if plan.dataset is None:
        images = synthetic_dataset(plan.synthetic_count, plan.synthetic_size, seed=[plan.seed, 2])
    else:
        images, _ = load_folder(plan.dataset)
        if not images:
            raise DatasetError(f"no readable images in {plan.dataset}")
    return [_as_channels(img, plan.network.c) for img in images]


def validation_images(plan):
    if plan.validation is None:
        return []
    images, _ = load_folder(plan.validation)
    return [_as_channels(img, plan.network.c) for img in images]


def degrade(hr, S):
    """(modcropped HR, bicubic LR) pair."""
    hr = modcrop(hr, S)
    return hr, bicubic_resize(hr, 1.0 / S)


# interpolated values are snapped to multiples of 2**-32 so that, for 8-bit
# images, both hr - x and x + r are exact in float64
_GRID = 2.0 ** 32


def make_residual_target(hr, S):
    """Interpolated input and residual target as (1, c, H, W) pixel-valued tensors.

    The input is the bicubic up-sampling of the bicubic LR image. The target
    is ``hr - input``, unclamped; ``input + target`` reproduces ``hr``
    bit-exactly when ``hr`` holds 8-bit values.
    """
    if hr.height % S or hr.width % S:
        raise ShapeError(f"{hr.height}x{hr.width} image is not modcropped for scale {S}")
    if hr.height < S or hr.width < S:
        raise ShapeError(f"{hr.height}x{hr.width} image is too small for scale {S}")
    up = bicubic_resize(bicubic_resize(hr, 1.0 / S), S)
    x = np.round(_planes(up.data) * _GRID) / _GRID
    return x[None], _planes(hr.data)[None] - x[None]


def _planes(arr):
    return arr[None] if arr.ndim == 2 else np.moveaxis(arr, 2, 0)


def _tensor(arr):
    return (_planes(arr) / PIXEL_MAX)[None]


def residual_patches(images, cfg, stride=None):
    """(interpolated, residual) training pairs in [0, 1] units; targets hold R."""
    stride = stride or STRIDE_RESIDUAL
    f = cfg.f_sub_R
    inputs, targets, origins = [], [], []
    for img in images:
        x, r = make_residual_target(modcrop(img, cfg.S), cfg.S)
        x, r = x[0] / PIXEL_MAX, r[0] / PIXEL_MAX
        _, h, w = x.shape
        for i in range(grid_count(h, f, stride)):
            for j in range(grid_count(w, f, stride)):
                a, b = i * stride, j * stride
                inputs.append(x[:, a:a + f, b:b + f])
                targets.append(r[:, a:a + f, b:b + f])
                origins.append((a, b))
    if not inputs:
        return PatchSet.concat([], cfg.c, f, f)
    return PatchSet(
        np.asarray(inputs, dtype=np.float32), np.asarray(targets, dtype=np.float32), origins,
    )


def dafr_patches(images, cfg, stride=None):
    """(LR, HR) training pairs for scale ``cfg.S``."""
    stride = stride or STRIDE_DAFR
    sets = []
    for img in images:
        hr, lr = degrade(img, cfg.S)
        sets.append(extract_patches(lr, hr, cfg, stride, mode=M.DAFR))
    return PatchSet.concat(sets, cfg.c, cfg.f_sub, cfg.S * cfg.f_sub)


# --- loop -----------------------------------------------------------------------

def _predict(model, x):
    y, acts = M.forward(model, x)
    return (y - x if model.kind == M.RESIDUAL else y), acts


def batch_loss(model, patches, idx, cfg=LossConfig()):
    """Loss on one batch at the current parameters (no update)."""
    pred, _ = _predict(model, patches.inputs[idx])
    return charbonnier_loss(pred, patches.targets[idx], cfg)[0]


def epoch_loss(model, patches, batch_size, cfg=LossConfig()):
    """Mean loss over consecutive full batches at fixed parameters."""
    count = len(patches) // batch_size
    if count == 0:
        raise DatasetError("fewer patches than one batch")
    losses = [
        batch_loss(model, patches, slice(b * batch_size, (b + 1) * batch_size), cfg)
        for b in range(count)
    ]
    return float(np.mean(losses))


def batches(count, batch_size, rng):
    """Index arrays for one shuffled epoch; the partial final batch is dropped."""
    perm = rng.permutation(count)
    return [perm[b * batch_size:(b + 1) * batch_size] for b in range(count // batch_size)]


def _train(model, patches, plan, rates, groups, phase, val_patches=None, val_images=()):
    """Shuffled-epoch SGD. ``rates(epoch)`` maps group -> learning rate."""
    bs = plan.optim.batch_size
    if len(patches) < bs:
        raise DatasetError(f"{len(patches)} patches cannot fill a batch of {bs}")
    report = TrainReport(phase)
    rng = np.random.default_rng([plan.seed, 1])
    best, stale, step = np.inf, 0, 0
    for epoch in range(plan.max_epochs):
        start = time.perf_counter()
        lrs = rates(epoch)
        stop = False
        for idx in batches(len(patches), bs, rng):
            pred, acts = _predict(model, patches.inputs[idx])
            loss, grad = charbonnier_loss(pred, patches.targets[idx], plan.loss)
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss diverged at step {step}")
            M.backward(model, acts, grad, groups)
            sgd_step(model, lrs, plan.optim)
            step += 1
            report.log(Record(step, epoch, lrs.get("conv", 0.0), lrs.get("deconv"), loss))
            if plan.max_iterations is not None and step >= plan.max_iterations:
                stop = True
                break
        if val_images:
            last = report.records[-1]
            report.records[-1] = replace(last, val_psnr=mean_psnr(model, val_images, model.config.S))
        report.epoch_seconds.append(time.perf_counter() - start)
        if stop:
            break
        current = (
            epoch_loss(model, val_patches, bs, plan.loss)
            if val_patches is not None and len(val_patches) >= bs
            else report.epoch_losses()[-1]
        )
        if current < best * (1.0 - plan.min_improvement):
            best, stale = current, 0
        else:
            stale += 1
            if stale >= plan.patience:
                log.info("%s saturated after %d epochs", phase, epoch + 1)
                break
    return report


def train_step1(plan):
    """Train the residual network from scratch; returns ``(model, report)``."""
    plan = replace(plan, phase=STEP1).validate()
    cfg = plan.network
    patches = residual_patches(training_images(plan), cfg, plan.stride)
    if len(patches) == 0:
        raise DatasetError("no residual patches: images smaller than the patch size")
    val = validation_images(plan)
    val_patches = residual_patches(val, cfg, plan.stride) if val else None
    net = M.build_residual_net(cfg, plan.seed)
    report = _train(
        net, patches, plan,
        lambda epoch: {"conv": lr_at(epoch, plan.optim)},
        ("conv",), STEP1, val_patches, val,
    )
    return net, report


def train_step2(plan, pretrained=None):
    """Build a DAFR model, copy in ``pretrained``'s conv stack and train it.

    With ``pretrained=None`` the stack keeps its random initialisation.
    """
    plan = replace(plan, phase=STEP2).validate()
    cfg = plan.network
    net = M.build_dafr(cfg, plan.seed)
    if pretrained is not None:
        if pretrained.kind != M.RESIDUAL:
            raise M.ConfigError("step 2 transfers from a residual network")
        M.transfer_weights(pretrained, net)
    patches = dafr_patches(training_images(plan), cfg, plan.stride)
    if len(patches) == 0:
        raise DatasetError("no training patches: images smaller than the patch size")
    val = validation_images(plan)
    val_patches = dafr_patches(val, cfg, plan.stride) if val else None
    lrs = {"conv": plan.optim.lr_conv, "deconv": plan.optim.lr_deconv}
    report = _train(net, patches, plan, lambda epoch: lrs, ("conv", "deconv"), STEP2, val_patches, val)
    return net, report


def rescale(base, S_new):
    """Copy of ``base`` with a fresh bilinear deconv for factor ``S_new``."""
    if base.kind != M.DAFR:
        raise M.ConfigError("only DAFR models carry a deconv layer")
    if S_new == base.scale:
        raise M.ConfigError(f"model is already at scale {S_new}")
    cfg = replace(base.config, S=S_new).validate()
    out = base.copy()
    out.config = cfg
    out.layers[-1] = M.make_deconv(cfg, S_new, base.dtype)
    return out


def finetune_scale(base, S_new, plan):
    """Move ``base`` to scale ``S_new`` by training only a rebuilt deconv.

    Conv weights and PReLU slopes are copied from ``base`` and never updated.
    """
    plan = replace(plan, phase=FINETUNE).validate()
    net = rescale(base, S_new)
    cfg = replace(net.config, f_sub=plan.network.f_sub)
    patches = dafr_patches(training_images(replace(plan, network=cfg)), cfg, plan.stride)
    if len(patches) == 0:
        raise DatasetError("no training patches: images smaller than the patch size")
    val = validation_images(plan)
    val_patches = dafr_patches(val, cfg, plan.stride) if val else None
    lrs = {"deconv": plan.optim.lr_deconv}
    report = _train(net, patches, plan, lambda epoch: lrs, ("deconv",), FINETUNE, val_patches, val)
    return net, report


# --- inference ------------------------------------------------------------------

def _upscale_planes(model, planes):
    """Run the model on (H, W[, c]) pixel planes; returns [0, 255] values."""
    x = _tensor(planes).astype(model.dtype)
    y, _ = M.forward(model, x)
    out = y[0].astype(np.float64) * PIXEL_MAX
    return out[0] if planes.ndim == 2 else np.moveaxis(out, 0, 2)


def _apply(model, img, chroma_scale):
    c = model.config.c
    if c == 1 and img.colorspace != GRAY:
        ycc = rgb_to_ycbcr(img) if img.colorspace == RGB else img
        data = bicubic_resize(ycc, chroma_scale).data.copy()
        data[:, :, 0] = _upscale_planes(model, ycc.data[:, :, 0])
        out = Image(data, YCBCR).clamped()
        return ycbcr_to_rgb(out) if img.colorspace == RGB else out
    if img.channels != c:
        raise ShapeError(f"model expects {c} channels, image has {img.channels}")
    return Image(_upscale_planes(model, img.data), img.colorspace).clamped()


def super_resolve(model, img):
    """Upscale ``img`` by the model's factor in one fully convolutional pass.

    Single-channel models see the Y plane of colour inputs; chroma is
    interpolated bicubically.
    """
    if model.kind != M.DAFR:
        raise M.ConfigError("super_resolve needs a DAFR model")
    return _apply(model, img, model.scale)


def reconstruct(model, lr, S):
    """HR estimate from ``lr``: bicubic when ``model`` is None. A residual
    network refines the bicubic interpolation."""
    up = bicubic_resize(lr, S)
    if model is None:
        return up
    if model.kind == M.RESIDUAL:
        return _apply(model, up, 1)
    if model.scale != S:
        raise M.ConfigError(f"model upscales by {model.scale}, not {S}")
    return super_resolve(model, lr)


def image_psnrs(model, images, S, shave=None):
    """Y-channel PSNR of each HR image against its reconstruction.

    Colour images are reduced to their Y plane before degradation, as in the
    usual benchmark protocol.
    """
    shave = S if shave is None else shave
    out = []
    for img in images:
        img = _as_channels(img, 1)
        hr, lr = degrade(img, S)
        out.append(psnr_y(reconstruct(model, lr, S), hr, shave))
    return out


def mean_psnr(model, images, S, shave=None):
    return float(np.mean(image_psnrs(model, images, S, shave)))
