"""Segmentation quality and calibration metrics.

Probability maps are ``[K,H,W]`` arrays; a single-channel map is a sigmoid
output and is expanded to ``(1-p, p)`` before scoring. The Brier score keeps
the ``1/|C|`` class normalization, so binary values are half the classic
two-class sum.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError

ABSENT = None  # marker for a class with no ground-truth pixels in an image


def expand(prob: np.ndarray) -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    if prob.shape[0] == 1:
        return np.concatenate([1.0 - prob, prob], axis=0)
    return prob


def to_labels(prob: np.ndarray) -> np.ndarray:
    return np.argmax(expand(prob), axis=0)


def _check_shapes(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape[1:] != target.shape:
        raise ShapeError(f"prediction spatial shape {pred.shape[1:]} != target shape {target.shape}")


def dice_coefficient(pred_labels, target, class_k: int) -> float:
    """2|A n B| / (|A| + |B|) for the pixels labelled ``class_k``; 1.0 if both are empty."""
    pred_labels, target = np.asarray(pred_labels), np.asarray(target)
    if pred_labels.shape != target.shape:
        raise ShapeError(f"label maps differ in shape: {pred_labels.shape} vs {target.shape}")
    a, b = pred_labels == class_k, target == class_k
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def brier_score(pred, target) -> float:
    """Mean over pixels of the class-averaged squared error against the one-hot truth."""
    p = expand(pred)
    target = np.asarray(target)
    _check_shapes(p, target)
    onehot = np.arange(p.shape[0]).reshape(-1, 1, 1) == target[None]
    return float(((p - onehot) ** 2).mean(axis=0).mean())


def stratified_brier_score(pred, target, class_k: int) -> float | None:
    """Brier score of class ``class_k`` restricted to its ground-truth pixels.

    Returns ``ABSENT`` when the class does not occur in ``target``.
    """
    p = expand(pred)
    target = np.asarray(target)
    _check_shapes(p, target)
    if not 0 <= class_k < p.shape[0]:
        raise ValueError(f"class {class_k} outside [0, {p.shape[0]})")
    region = target == class_k
    if not region.any():
        return ABSENT
    indicator = (target[region] == class_k).astype(np.float64)
    return float(((p[class_k][region] - indicator) ** 2).mean())


def prediction_variance(member_maps: Sequence[np.ndarray], region: np.ndarray | None = None) -> float:
    """Mean over pixels and classes of the across-member population variance.

    ``region`` optionally restricts the mean to a boolean pixel mask.
    """
    if len(member_maps) < 2:
        raise ValueError("prediction variance needs at least two member maps")
    shapes = {np.shape(m) for m in member_maps}
    if len(shapes) > 1:
        raise ShapeError(f"member maps differ in shape: {sorted(shapes)}")
    var = np.stack([expand(m) for m in member_maps]).var(axis=0)
    if region is not None:
        if not region.any():
            return ABSENT
        var = var[:, region]
    return float(var.mean())


# ---------------------------------------------------------------------------
# sliding-window inference


def window_starts(size: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def sliding_window_predict(predict: Callable[[np.ndarray], np.ndarray], image: np.ndarray,
                           patch_size: int | None = None, stride: int | None = None) -> np.ndarray:
    """Tile ``image`` into overlapping windows and average the overlapping outputs.

    ``predict`` maps a ``[B,C,p,p]`` batch to ``[B,K,p,p]``. With no
    ``patch_size`` (or one covering the image) the whole image goes through once.
    """
    _, H, W = image.shape
    if patch_size is None or (patch_size >= H and patch_size >= W):
        return predict(image[None])[0]
    stride = stride or max(patch_size // 2, 1)
    corners = [(r, c) for r in window_starts(H, patch_size, stride) for c in window_starts(W, patch_size, stride)]
    batch = np.stack([image[:, r:r + patch_size, c:c + patch_size] for r, c in corners])
    outs = predict(batch)
    acc = np.zeros((outs.shape[1], H, W))
    count = np.zeros((H, W))
    for (r, c), o in zip(corners, outs):
        acc[:, r:r + patch_size, c:c + patch_size] += o
        count[r:r + patch_size, c:c + patch_size] += 1.0
    return acc / count


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    dice_per_class: dict[int, float]
    brier: float
    stratified_brier_per_class: dict[int, float | None]
    mean_prediction_variance: float | None = None
    image: int | None = None

    @property
    def lesion_dice(self) -> float:
        vals = [v for k, v in self.dice_per_class.items() if k != 0]
        return float(np.mean(vals))

    @property
    def lesion_stratified_brier(self) -> float | None:
        vals = [v for k, v in self.stratified_brier_per_class.items() if k != 0 and v is not None]
        return float(np.mean(vals)) if vals else ABSENT

    def to_record(self) -> dict:
        rec = {"image": self.image,
               "dice": {str(k): v for k, v in sorted(self.dice_per_class.items())},
               "brier": self.brier,
               "stratified_brier": {str(k): v for k, v in sorted(self.stratified_brier_per_class.items())},
               "mean_prediction_variance": self.mean_prediction_variance,
               "lesion_dice": self.lesion_dice,
               "lesion_stratified_brier": self.lesion_stratified_brier}
        return rec


@dataclass
class Evaluation:
    images: list[MetricsReport]
    aggregate: MetricsReport


def score_image(prob: np.ndarray, target: np.ndarray, num_classes: int,
                member_maps: Sequence[np.ndarray] | None = None, variance_region: str = "all",
                image: int | None = None) -> MetricsReport:
    labels = to_labels(prob)
    var = ABSENT
    if member_maps is not None and len(member_maps) >= 2:
        region = target != 0 if variance_region == "foreground" else None
        var = prediction_variance(member_maps, region)
    return MetricsReport(
        {k: dice_coefficient(labels, target, k) for k in range(num_classes)},
        brier_score(prob, target),
        {k: stratified_brier_score(prob, target, k) for k in range(num_classes)},
        var, image)


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Per-image mean; absent stratified values and variances are skipped."""
    if not reports:
        raise ValueError("nothing to aggregate")
    classes = sorted(reports[0].dice_per_class)

    def mean_present(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else ABSENT

    return MetricsReport(
        {k: float(np.mean([r.dice_per_class[k] for r in reports])) for k in classes},
        float(np.mean([r.brier for r in reports])),
        {k: mean_present([r.stratified_brier_per_class[k] for r in reports]) for k in classes},
        mean_present([r.mean_prediction_variance for r in reports]))


def evaluate_maps(member_maps: np.ndarray, targets: np.ndarray, indices: Sequence[int] | None = None,
                  variance_region: str = "all") -> Evaluation:
    """Score the ensemble mean of ``member_maps`` ``[M, n, K, H, W]`` against ``targets`` ``[n, H, W]``."""
    member_maps = np.asarray(member_maps)
    if member_maps.shape[0] < 1 or member_maps.shape[1] < 1:
        raise ValueError("no members or no images to evaluate")
    num_classes = max(member_maps.shape[2], 2)
    indices = list(indices) if indices is not None else list(range(member_maps.shape[1]))
    reports = []
    for j in range(member_maps.shape[1]):
        per_member = list(member_maps[:, j])
        prob = per_member[0] if len(per_member) == 1 else np.mean(per_member, axis=0)
        reports.append(score_image(prob, targets[j], num_classes,
                                   per_member if len(per_member) > 1 else None, variance_region, indices[j]))
    return Evaluation(reports, aggregate(reports))


def member_prob_maps(members, images: np.ndarray, patch_size: int | None = None,
                     stride: int | None = None) -> np.ndarray:
    """``[M, n, K, H, W]`` probability maps; members need a batched ``predict``."""
    return np.stack([np.stack([sliding_window_predict(m.predict, img, patch_size, stride) for img in images])
                     for m in members])


def evaluate(ens, dataset, split: str = "test", patch_size: int | None = None,
             variance_region: str = "all") -> Evaluation:
    """Sliding-window inference of every member over a split, then scoring."""
    idx = dataset.split(split)
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    maps = member_prob_maps(ens.members, dataset.images[idx], patch_size)
    return evaluate_maps(maps, dataset.masks[idx], idx, variance_region)
