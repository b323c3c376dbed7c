"""Charbonnier loss, clipped momentum SGD and the step learning-rate schedule."""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """``reduction`` is ``"mean"`` (over every element) or ``"sample"``
    (summed over each sample's pixels, averaged over the batch)."""

    epsilon: float = 0.001
    alpha: float = 0.5
    reduction: str = "mean"

    def __post_init__(self):
        if self.reduction not in ("mean", "sample"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")


@dataclass(frozen=True)
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 64
    lr_initial: float = 0.1
    lr_decay: float = 0.1
    lr_step_epochs: int = 20
    lr_conv: float = 1e-5
    lr_deconv: float = 1e-4
    clip_theta: float = 0.01

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        rates = (self.lr_initial, self.lr_conv, self.lr_deconv, self.clip_theta)
        if min(rates) <= 0 or self.batch_size < 1 or self.lr_step_epochs < 1:
            raise ValueError(f"rates, batch size and step length must be positive: {self}")


def charbonnier_loss(pred, target, cfg=LossConfig()):
    """Charbonnier penalty ``(d**2 + eps**2) ** alpha`` of ``pred - target``.

    Returns the reduced loss and its gradient with respect to ``pred``.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    d = pred - target
    base = d * d + pred.dtype.type(cfg.epsilon * cfg.epsilon)
    count = d.size if cfg.reduction == "mean" else max(d.shape[0], 1)
    loss = float(np.sum(base ** cfg.alpha, dtype=np.float64)) / count
    grad = (2.0 * cfg.alpha / count) * d * base ** (cfg.alpha - 1.0)
    return loss, grad.astype(pred.dtype, copy=False)


def clip_gradient(grad, lr, theta):
    """Clamp to [-theta/lr, theta/lr]; works on scalars and arrays."""
    bound = theta / lr
    return np.clip(grad, -bound, bound)


def lr_at(epoch, cfg=OptimConfig()):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr_initial * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


def sgd_step(model, lr_per_group, cfg=OptimConfig()):
    """One momentum update of every layer whose group has a learning rate.

    Groups missing from ``lr_per_group`` are left untouched. Gradients are
    consumed (cleared) so a second step without a new backward pass fails.
    """
    for layer in model.layers:
        lr = lr_per_group.get(layer.group)
        if lr is None:
            continue
        if not layer.grads:
            raise StateError(f"{layer.kind} layer has no gradients; run backward first")
        for name, p in layer.params.items():
            g = layer.grads[name]
            if name in layer.decayed and cfg.weight_decay:
                g = g + p.dtype.type(cfg.weight_decay) * p
            g = clip_gradient(g, lr, cfg.clip_theta)
            v = layer.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = p.dtype.type(cfg.momentum) * v - p.dtype.type(lr) * g
            layer.velocity[name] = v
            p += v
        layer.grads = {}
