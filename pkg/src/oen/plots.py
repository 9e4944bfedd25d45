"""Boxplot figures for merged evaluation results."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MODE_COLORS = {"random": "#9e9e9e", "self_orth": "#4c72b0", "inter_orth": "#dd8452"}
LABELS = {
    "lesion_dice": "Lesion Dice",
    "lesion_stratified_brier": "Lesion stratified Brier",
    "brier": "Brier",
    "mean_prediction_variance": "Prediction variance",
}

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "figure.dpi": 120,
    "svg.hashsalt": "oen",
})


def metric_boxplot(long: Sequence[dict], metric: str, path) -> Path | None:
    """Boxes of per-repeat values, grouped by ensemble size, one colour per mode."""
    data = defaultdict(list)
    for r in long:
        if r["metric"] == metric:
            data[(r["mode"], r["size"])].append(r["value"])
    if not data:
        return None
    modes = sorted({m for m, _ in data}, key=lambda m: list(MODE_COLORS).index(m) if m in MODE_COLORS else 99)
    sizes = sorted({s for _, s in data})
    width = 0.8 / len(modes)

    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(sizes), 2.6))
    for j, mode in enumerate(modes):
        pos, vals = [], []
        for i, s in enumerate(sizes):
            if (mode, s) in data:
                pos.append(i + (j - (len(modes) - 1) / 2) * width)
                vals.append(data[(mode, s)])
        bp = ax.boxplot(vals, positions=pos, widths=width * 0.85, patch_artist=True, showmeans=True,
                        medianprops={"color": "black", "linewidth": 0.8},
                        meanprops={"marker": "^", "markerfacecolor": "white", "markeredgecolor": "black",
                                   "markersize": 4},
                        flierprops={"markersize": 2})
        for box in bp["boxes"]:
            box.set_facecolor(MODE_COLORS.get(mode, "#55a868"))
            box.set_linewidth(0.6)
        ax.plot([], [], "s", color=MODE_COLORS.get(mode, "#55a868"), label=mode)
    ax.set_xticks(range(len(sizes)))
    ax.set_xticklabels([f"N={s}" for s in sizes])
    ax.set_ylabel(LABELS.get(metric, metric))
    ax.legend(loc="best")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def render_figures(long: Sequence[dict], out_dir, metrics: Sequence[str] = tuple(LABELS)) -> list[Path]:
    out = []
    for m in metrics:
        p = metric_boxplot(long, m, Path(out_dir) / f"{m}.png")
        if p is not None:
            out.append(p)
    return out
