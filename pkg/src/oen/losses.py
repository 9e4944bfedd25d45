"""Segmentation losses on probability maps.

Probability maps are ``[K,H,W]`` (or batched ``[B,K,H,W]``). A single
channel is a sigmoid output holding the foreground probability of a binary
task; targets are integer label maps ``[H,W]`` / ``[B,H,W]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DICE_SMOOTH = 1e-6
CE_EPS = 1e-12


class LabelRangeError(ValueError):
    pass


@dataclass
class LossValue:
    value: Tensor
    per_class: dict[int, float] = field(default_factory=dict)

    def item(self) -> float:
        return self.value.item()


def _check(pred: Tensor, target: np.ndarray) -> tuple[int, int]:
    """Returns (class axis, number of classes)."""
    target = np.asarray(target)
    if pred.ndim == target.ndim + 1 and pred.ndim in (3, 4):
        c_axis = pred.ndim - 3
    else:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} are incompatible")
    spatial = pred.shape[:c_axis] + pred.shape[c_axis + 1:]
    if spatial != target.shape:
        raise ShapeError(f"prediction spatial shape {spatial} != target shape {target.shape}")
    n_classes = max(pred.shape[c_axis], 2)
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise LabelRangeError(f"target labels must lie in [0, {n_classes}), "
                              f"got range [{target.min()}, {target.max()}]")
    return c_axis, n_classes


def one_hot(target: np.ndarray, num_classes: int) -> np.ndarray:
    # [K,H,W] for a single map, [B,K,H,W] for a batch
    return (np.arange(num_classes).reshape((-1, 1, 1)) == target[..., None, :, :]).astype(np.float64)


def soft_dice_loss(pred, target, smooth: float = DICE_SMOOTH,
                   exclude_background: bool = False) -> LossValue:
    """1 - mean over classes of (2*sum(p*g) + s) / (sum(p^2) + sum(g^2) + s).

    Sums run over all pixels (and the batch). For a single sigmoid channel
    only the foreground class is scored.
    """
    pred = T.as_tensor(pred)
    target = np.asarray(target)
    c_axis, n_classes = _check(pred, target)
    n_ch = pred.shape[c_axis]
    if n_ch == 1:
        g = (target == 1).astype(np.float64)
        g = g[None] if c_axis == 0 else g[:, None]
        classes = [1]
    else:
        g = one_hot(target, n_ch)
        classes = list(range(n_ch))
    axes = tuple(a for a in range(pred.ndim) if a != c_axis)
    inter = T.tsum(pred * g, axis=axes)
    denom = T.tsum(T.square(pred), axis=axes) + (g * g).sum(axis=axes) + smooth
    dice = (2.0 * inter + smooth) / denom
    loss_k = 1.0 - dice
    per_class = {k: float(v) for k, v in zip(classes, loss_k.data)}
    if exclude_background and n_ch > 1:
        keep = np.zeros(n_ch)
        keep[1:] = 1.0
        value = T.tsum(loss_k * keep) * (1.0 / (n_ch - 1))
        per_class.pop(0)
    else:
        value = T.mean(loss_k)
    return LossValue(value, per_class)


def cross_entropy_loss(pred, target, eps: float = CE_EPS) -> LossValue:
    """Mean over pixels of -log p(true class), probabilities clamped to [eps, 1-eps]."""
    pred = T.as_tensor(pred)
    target = np.asarray(target)
    c_axis, _ = _check(pred, target)
    p = T.clip(pred, eps, 1.0 - eps)
    if pred.shape[c_axis] == 1:
        g = (target == 1).astype(np.float64)
        g = g[None] if c_axis == 0 else g[:, None]
        ll = g * T.log(p) + (1.0 - g) * T.log(1.0 - p)
    else:
        g = one_hot(target, pred.shape[c_axis])
        ll = T.tsum(g * T.log(p), axis=c_axis)
    return LossValue(-1.0 * T.mean(ll))


SEG_LOSSES = {"soft_dice": soft_dice_loss, "cross_entropy": cross_entropy_loss}
