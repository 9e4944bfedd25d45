"""Sub-ensemble evaluation records and their aggregation.

Evaluation files are JSON Lines. Every line is an object with a ``record``
field:

``header``
    ``schema``, ``mode``, ``pool_size``, ``sizes``, ``repeats``, ``seed``, ``split``
``image``
    one sub-ensemble scored on one image: ``mode``, ``size``, ``repeat``,
    ``members`` plus the per-image metrics
``subset``
    the per-image mean for one sub-ensemble, flattened to metric columns
``aggregate``
    ``mode``, ``size``, ``n_subsets`` and ``metrics``: ``{name: {mean, std}}``
    over the ``subset`` rows of that size (population std, absent values skipped)

Metric columns: ``lesion_dice``, ``lesion_stratified_brier``, ``brier``,
``mean_prediction_variance``, ``dice_<k>``, ``stratified_brier_<k>``.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import Evaluation, MetricsReport, evaluate_maps

SCHEMA = "oen-eval/1"
HEADLINE = ("lesion_dice", "lesion_stratified_brier", "brier", "mean_prediction_variance")


class SchemaError(ValueError):
    pass


class PoolTooSmallError(ValueError):
    pass


def draw_subsets(pool_size: int, size: int, repeats: int, seed: int) -> list[tuple[int, ...]]:
    """Distinct member subsets, at most ``repeats``; all of them when fewer exist."""
    if not 1 <= size <= pool_size:
        raise PoolTooSmallError(f"ensemble size {size} not in [1, pool size {pool_size}]")
    total = math.comb(pool_size, size)
    if total <= repeats:
        return list(itertools.combinations(range(pool_size), size))
    rng = np.random.default_rng(np.random.SeedSequence([seed, size]))
    seen, out = set(), []
    while len(out) < repeats:
        pick = tuple(sorted(int(i) for i in rng.choice(pool_size, size=size, replace=False)))
        if pick not in seen:
            seen.add(pick)
            out.append(pick)
    return out


def flatten(report: MetricsReport) -> dict[str, float | None]:
    row = {"lesion_dice": report.lesion_dice,
           "lesion_stratified_brier": report.lesion_stratified_brier,
           "brier": report.brier,
           "mean_prediction_variance": report.mean_prediction_variance}
    for k, v in sorted(report.dice_per_class.items()):
        row[f"dice_{k}"] = v
    for k, v in sorted(report.stratified_brier_per_class.items()):
        row[f"stratified_brier_{k}"] = v
    return row


def summarize(rows: Sequence[dict], metrics: Iterable[str]) -> dict[str, dict[str, float | None]]:
    out = {}
    for m in metrics:
        vals = np.array([r[m] for r in rows if r.get(m) is not None], dtype=np.float64)
        out[m] = ({"mean": float(vals.mean()), "std": float(vals.std())} if vals.size
                  else {"mean": None, "std": None})
    return out


def subsample_records(member_maps: np.ndarray, targets: np.ndarray, indices: Sequence[int], mode: str,
                      sizes: Sequence[int], repeats: int, seed: int, split: str,
                      variance_region: str = "all", workers: int = 1) -> list[dict]:
    """``workers > 1`` scores sub-ensembles in threads; the records do not depend on it."""
    pool = member_maps.shape[0]
    for s in sizes:
        if s > pool:
            raise PoolTooSmallError(f"ensemble size {s} exceeds pool size {pool}")
    records = [{"record": "header", "schema": SCHEMA, "mode": mode, "pool_size": pool,
                "sizes": list(sizes), "repeats": repeats, "seed": seed, "split": split}]

    def score(members) -> Evaluation:
        return evaluate_maps(member_maps[list(members)], targets, indices, variance_region)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for size in sizes:
            subsets = draw_subsets(pool, size, repeats, seed)
            evals = list(executor.map(score, subsets))
            rows = []
            for r, (members, ev) in enumerate(zip(subsets, evals)):
                key = {"mode": mode, "size": size, "repeat": r, "members": list(members)}
                for rep in ev.images:
                    records.append({"record": "image", **key, **rep.to_record()})
                row = flatten(ev.aggregate)
                rows.append(row)
                records.append({"record": "subset", **key, **row})
            records.append({"record": "aggregate", "mode": mode, "size": size, "n_subsets": len(rows),
                            "metrics": summarize(rows, rows[0].keys())})
    return records


def dumps_jsonl(records: Iterable[dict]) -> bytes:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode("utf-8")


def load_eval_file(path) -> list[dict]:
    path = Path(path)
    try:
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not JSON Lines ({exc})") from None
    if not records or records[0].get("record") != "header" or records[0].get("schema") != SCHEMA:
        raise SchemaError(f"{path}: missing {SCHEMA!r} header record")
    for i, rec in enumerate(records):
        if rec.get("record") not in ("header", "image", "subset", "aggregate"):
            raise SchemaError(f"{path}: line {i + 1} has unknown record type {rec.get('record')!r}")
        if rec["record"] == "subset" and not {"mode", "size", "repeat", *HEADLINE} <= rec.keys():
            raise SchemaError(f"{path}: subset record on line {i + 1} lacks required fields")
    return records


def merge(paths: Sequence) -> tuple[list[dict], list[dict]]:
    """Regroup ``subset`` rows of several eval files by (mode, size).

    Returns (summary rows, long-format plot records).
    """
    groups: dict[tuple[str, int], list[dict]] = defaultdict(list)
    metric_names: list[str] | None = None
    for p in paths:
        for rec in load_eval_file(p):
            if rec["record"] != "subset":
                continue
            names = [k for k in rec if k not in ("record", "mode", "size", "repeat", "members")]
            if metric_names is None:
                metric_names = names
            elif sorted(names) != sorted(metric_names):
                raise SchemaError(f"{p}: metric columns {sorted(names)} differ from earlier files")
            groups[(rec["mode"], rec["size"])].append(rec)
    if not groups:
        raise SchemaError("no subset records in the given files")

    summary, long = [], []
    for (mode, size), rows in sorted(groups.items()):
        stats = summarize(rows, metric_names)
        for m in metric_names:
            summary.append({"mode": mode, "size": size, "metric": m, "n": len(rows), **stats[m]})
        for r in rows:
            for m in metric_names:
                if r[m] is not None:
                    long.append({"mode": mode, "size": size, "repeat": r["repeat"], "metric": m, "value": r[m]})
    return summary, long


def summary_tsv(summary: Sequence[dict]) -> str:
    lines = ["metric\tmode\tsize\tn\tmean\tstd"]
    for row in sorted(summary, key=lambda r: (r["metric"], r["mode"], r["size"])):
        mean = "" if row["mean"] is None else repr(row["mean"])
        std = "" if row["std"] is None else repr(row["std"])
        lines.append(f"{row['metric']}\t{row['mode']}\t{row['size']}\t{row['n']}\t{mean}\t{std}")
    return "\n".join(lines) + "\n"


def summary_markdown(summary: Sequence[dict], metrics: Sequence[str] = HEADLINE) -> str:
    sizes = sorted({r["size"] for r in summary})
    out = []
    for m in metrics:
        rows = [r for r in summary if r["metric"] == m]
        if not rows:
            continue
        out.append(f"### {m}\n")
        out.append("| mode | " + " | ".join(f"N={s}" for s in sizes) + " |")
        out.append("|---" * (len(sizes) + 1) + "|")
        for mode in sorted({r["mode"] for r in rows}):
            cells = []
            for s in sizes:
                hit = [r for r in rows if r["mode"] == mode and r["size"] == s]
                cells.append("-" if not hit or hit[0]["mean"] is None
                             else f"{hit[0]['mean']:.4f} ± {hit[0]['std']:.4f}")
            out.append(f"| {mode} | " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)
