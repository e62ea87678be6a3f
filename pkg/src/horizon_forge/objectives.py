"""Segmentation losses (BCE, Dice, their weighted sum) and pixel metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, custom_op, _as_tensor

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6
THRESHOLD = 0.5


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5  # BCE weight
    beta: float = 0.5  # Dice weight
    dice_eps: float = DICE_EPS
    prob_clamp: float = PROB_CLAMP

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("loss weights must be non-negative with a positive sum")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be positive")

    @classmethod
    def dice_only(cls) -> "LossConfig":
        return cls(alpha=0.0, beta=1.0)


def _check_target(pred: Tensor, target) -> np.ndarray:
    y = np.asarray(target, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {pred.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("target must be binary (0/1)")
    return y


def bce_loss(pred, target, prob_clamp: float = PROB_CLAMP) -> Tensor:
    """Mean binary cross-entropy over all pixels of the batch."""
    pred = _as_tensor(pred)
    y = _check_target(pred, target)
    p = np.clip(pred.data, prob_clamp, 1.0 - prob_clamp)
    inside = (pred.data >= prob_clamp) & (pred.data <= 1.0 - prob_clamp)
    n = p.size
    val = -(y * np.log(p) + (1 - y) * np.log1p(-p)).mean()

    def _backward(g):
        dp = (p - y) / (p * (1 - p)) / n
        return (g.reshape(()) * dp * inside,)

    return custom_op("bce", (pred,), np.asarray(val, dtype=pred.dtype).reshape(1, 1, 1, 1), _backward)


def dice_loss(pred, target, dice_eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss, computed per sample and averaged over the batch."""
    pred = _as_tensor(pred)
    y = _check_target(pred, target)
    p = pred.data
    axes = tuple(range(1, p.ndim))
    inter = (y * p).sum(axis=axes)
    denom = (y * y).sum(axis=axes) + (p * p).sum(axis=axes) + dice_eps
    num = 2 * inter + dice_eps
    nb = p.shape[0]
    val = (1.0 - num / denom).mean()
    shape = (nb,) + (1,) * (p.ndim - 1)

    def _backward(g):
        d_num = (-1.0 / denom / nb).reshape(shape)
        d_den = (num / denom ** 2 / nb).reshape(shape)
        dp = d_num * 2 * y + d_den * 2 * p
        return (g.reshape(()) * dp,)

    return custom_op("dice", (pred,), np.asarray(val, dtype=pred.dtype).reshape(1, 1, 1, 1), _backward)


def composite_loss(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """``alpha * bce + beta * dice``."""
    pred = _as_tensor(pred)
    bce = bce_loss(pred, target, cfg.prob_clamp)
    dice = dice_loss(pred, target, cfg.dice_eps)
    a, b = cfg.alpha, cfg.beta
    val = a * bce.data + b * dice.data
    return custom_op("composite", (bce, dice), val, lambda g: (a * g, b * g))


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(x, threshold: float = THRESHOLD) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype == bool:
        return a
    if np.all((a == 0) | (a == 1)):
        return a.astype(bool)
    return a > threshold


def confusion(pred, target) -> ConfusionCounts:
    p, t = binarize(pred), binarize(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def iou(pred, target) -> float:
    """Jaccard index; two empty masks score 1.0."""
    c = confusion(pred, target)
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def pixel_accuracy(pred, target) -> float:
    c = confusion(pred, target)
    return (c.tp + c.tn) / c.total
