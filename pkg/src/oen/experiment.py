"""Repeated paired comparison of ensemble training modes on one dataset."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import SynthDataset
from .metrics import evaluate_maps, member_prob_maps
from .training import TrainConfig, build_ensemble

logger = logging.getLogger(__name__)

REPEAT_SEED_STRIDE = 1_000_003


@dataclass
class RepeatResult:
    mode: str
    repeat: int
    ensemble_dice: float
    ensemble_stratified_brier: float | None
    ensemble_brier: float
    variance: float | None
    single_dice: list[float]
    single_stratified_brier: list[float | None]
    single_brier: list[float]


def run_repeat(cfg: TrainConfig, dataset: SynthDataset, n_members: int, repeat: int,
               split: str = "test") -> RepeatResult:
    cfg = replace(cfg, seed=cfg.seed + repeat * REPEAT_SEED_STRIDE)
    ens = build_ensemble(cfg, dataset, n_members)
    idx = dataset.split(split)
    maps = member_prob_maps(ens.members, dataset.images[idx], cfg.patch_size)
    full = evaluate_maps(maps, dataset.masks[idx], idx).aggregate
    singles = [evaluate_maps(maps[k:k + 1], dataset.masks[idx], idx).aggregate for k in range(n_members)]
    return RepeatResult(cfg.mode, repeat, full.lesion_dice, full.lesion_stratified_brier, full.brier,
                        full.mean_prediction_variance, [s.lesion_dice for s in singles],
                        [s.lesion_stratified_brier for s in singles], [s.brier for s in singles])


def run_comparison(cfg: TrainConfig, dataset: SynthDataset, modes: Sequence[str], n_members: int,
                   repeats: int) -> dict[str, list[RepeatResult]]:
    """Every mode shares the per-repeat seeds, so repeats are paired across modes."""
    out: dict[str, list[RepeatResult]] = {m: [] for m in modes}
    for r in range(repeats):
        for mode in modes:
            res = run_repeat(replace(cfg, mode=mode), dataset, n_members, r)
            logger.info("repeat %d %s: dice %.4f strat %.4f var %s", r, mode, res.ensemble_dice,
                        res.ensemble_stratified_brier or float("nan"), res.variance)
            out[mode].append(res)
    return out


def sign_test_greater(a: Sequence[float], b: Sequence[float]) -> tuple[int, int, float]:
    """One-sided exact sign test of ``a > b`` on paired samples; ties are dropped.

    Returns (wins, non-tied pairs, p-value).
    """
    diffs = [x - y for x, y in zip(a, b) if x != y]
    n = len(diffs)
    wins = sum(d > 0 for d in diffs)
    p = sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n if n else 1.0
    return wins, n, p


def count_at_least(a: Sequence[float], b: Sequence[float]) -> int:
    return int(np.sum(np.asarray(a) >= np.asarray(b)))
