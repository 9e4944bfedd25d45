"""Command-line front end: gen / train / eval / report."""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config, with_seed
from .container import CorruptFileError, atomic_write_bytes
from .data import InfeasibleParamsError, NoCandidateError, SynthDataset, generate
from .metrics import member_prob_maps
from .model import save_checkpoint
from .reporting import PoolTooSmallError, SchemaError, dumps_jsonl, merge, subsample_records
from .reporting import summary_markdown, summary_tsv
from .training import MODES, TrainingDivergedError, build_ensemble, load_ensemble, save_ensemble

logger = logging.getLogger("oen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4, 5

EPILOG = """\
exit codes:
  0  success
  2  configuration error (unreadable or invalid config file, bad arguments)
  3  data error (dataset generation failed, unreadable or corrupt input file)
  4  training error (non-finite loss)
  5  evaluation error (ensemble size larger than the pool, schema mismatch)
"""


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _exit_code(fn):
    """Turn a :class:`CommandError` into its exit code plus a one-line message on stderr."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs) -> int:
        try:
            return fn(*args, **kwargs)
        except CommandError as exc:
            print(f"oen {fn.__name__.removeprefix('cmd_')}: {exc}", file=sys.stderr)
            return exc.code

    return wrapper


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _git_commit() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _write_manifest(out: Path, command: str, args: dict, config: dict | None, artifacts: dict,
                    started: float, **extra) -> None:
    manifest = {
        "command": command,
        "arguments": args,
        "config": config,
        "version": {"package": __version__, "git": _git_commit()},
        "artifacts": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in artifacts.items()},
        **extra,
        # the only non-reproducible field
        "timings": {"wall_clock_seconds": round(time.time() - started, 3),
                    "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")},
    }
    atomic_write_bytes(manifest_path(out), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _load_config(path, seed, target):
    try:
        return with_seed(load_config(path), seed, target)
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, f"config error: {exc}") from None


def _load_dataset(path) -> SynthDataset:
    try:
        return SynthDataset.load(path)
    except (OSError, CorruptFileError, KeyError, TypeError) as exc:
        raise CommandError(EXIT_DATA, f"cannot read dataset {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


@_exit_code
def cmd_gen(config_path, out_path, seed: int | None = None) -> int:
    started = time.time()
    cfg = _load_config(config_path, seed, "gen")
    try:
        ds = generate(cfg.gen)
    except InfeasibleParamsError as exc:
        raise CommandError(EXIT_DATA, f"generation failed: {exc}") from None
    out = Path(out_path)
    ds.save(out)
    _write_manifest(out, "gen", {"config": str(config_path), "out": str(out), "seed": seed},
                    cfg.snapshot(), {"dataset": out}, started,
                    seeds={"gen": cfg.gen.seed})
    logger.info("wrote %s (%d images)", out, len(ds.images))
    return EXIT_OK


@_exit_code
def cmd_train(config_path, dataset_path, mode: str, n_members: int, out_path, seed: int | None = None,
              workers: int = 1) -> int:
    started = time.time()
    cfg = _load_config(config_path, seed, "train")
    if mode not in MODES:
        raise CommandError(EXIT_CONFIG, f"mode must be one of {MODES}")
    if n_members < 1:
        raise CommandError(EXIT_CONFIG, "n_members must be >= 1")
    ds = _load_dataset(dataset_path)
    tcfg = replace(cfg.train, mode=mode)
    if ds.params.in_channels != tcfg.arch.in_channels or ds.num_classes != tcfg.arch.num_classes:
        raise CommandError(EXIT_DATA, "dataset channels/classes do not match the configured architecture")

    def progress(k, net, log):
        last = log.epochs[-1]
        logger.info("member %d/%d trained: seg %.4f self %.4f inter %.4f",
                    k + 1, n_members, last.seg_loss, last.self_orth, last.inter_orth)

    try:
        ens = build_ensemble(tcfg, ds, n_members, workers=workers, on_member=progress)
    except TrainingDivergedError as exc:
        raise CommandError(EXIT_TRAIN, f"training aborted: {exc}") from None
    except NoCandidateError as exc:
        raise CommandError(EXIT_DATA, f"patch sampling failed: {exc}") from None

    out = Path(out_path)
    snapshot = cfg.snapshot()
    snapshot["train"]["mode"] = mode
    ens.info = {"config": snapshot, "patch_size": tcfg.patch_size, "dataset_sha256": _sha256(dataset_path)}
    member_dir = out.with_name(out.name + ".members")
    artifacts = {}
    for k, (net, meta) in enumerate(zip(ens.members, ens.meta)):
        p = member_dir / f"member{k:03d}.ckpt"
        save_checkpoint(p, net, **asdict(meta), arch_config=snapshot["arch"])
        artifacts[f"member{k}"] = p
    log_path = out.with_name(out.name + ".log.jsonl")
    atomic_write_bytes(log_path, dumps_jsonl(r for log in ens.logs for r in log.records()))
    save_ensemble(ens, out)
    artifacts.update({"ensemble": out, "training_log": log_path})
    _write_manifest(out, "train", {"config": str(config_path), "dataset": str(dataset_path), "mode": mode,
                                   "n_members": n_members, "out": str(out), "seed": seed, "workers": workers},
                    snapshot, artifacts, started,
                    seeds={"base": tcfg.seed, "members": [m.seed for m in ens.meta]},
                    members=[{**asdict(m), "weight_sha256": net.weight_digest()}
                             for m, net in zip(ens.meta, ens.members)])
    return EXIT_OK


@_exit_code
def cmd_eval(ensemble_path, dataset_path, subsample_sizes, n_repeats: int, seed: int, out_path,
             split: str | None = None, variance_region: str | None = None, patch_size: int | None = None,
             workers: int = 1) -> int:
    """``split`` and ``variance_region`` default to the eval section of the training config."""
    started = time.time()
    try:
        ens = load_ensemble(ensemble_path)
    except (OSError, CorruptFileError, KeyError, TypeError) as exc:
        raise CommandError(EXIT_DATA, f"cannot read ensemble {ensemble_path}: {exc}") from None
    ds = _load_dataset(dataset_path)
    eval_cfg = (ens.info.get("config") or {}).get("eval", {})
    split = split or eval_cfg.get("split", "test")
    variance_region = variance_region or eval_cfg.get("variance_region", "all")
    sizes = sorted(set(int(s) for s in subsample_sizes))
    if not sizes or sizes[0] < 1:
        raise CommandError(EXIT_CONFIG, "subsample sizes must be positive")
    if sizes[-1] > len(ens):
        raise CommandError(EXIT_EVAL, f"ensemble size {sizes[-1]} exceeds the pool of {len(ens)} members")
    if n_repeats < 1:
        raise CommandError(EXIT_CONFIG, "repeats must be >= 1")
    try:
        idx = ds.split(split)
    except KeyError as exc:
        raise CommandError(EXIT_EVAL, str(exc)) from None
    if not idx:
        raise CommandError(EXIT_EVAL, f"split {split!r} is empty")

    patch = patch_size or ens.info.get("patch_size")
    modes = sorted({m.mode for m in ens.meta})
    maps = member_prob_maps(ens.members, ds.images[idx], patch)
    try:
        records = subsample_records(maps, ds.masks[idx], idx, "+".join(modes), sizes, n_repeats, seed,
                                    split, variance_region, workers)
    except PoolTooSmallError as exc:
        raise CommandError(EXIT_EVAL, str(exc)) from None
    out = Path(out_path)
    atomic_write_bytes(out, dumps_jsonl(records))
    _write_manifest(out, "eval", {"ensemble": str(ensemble_path), "dataset": str(dataset_path),
                                  "sizes": sizes, "repeats": n_repeats, "seed": seed, "split": split,
                                  "variance_region": variance_region, "patch_size": patch},
                    ens.info.get("config"), {"metrics": out}, started, seeds={"subsets": seed})
    n_sub = sum(r["record"] == "subset" for r in records)
    logger.info("evaluated %d sub-ensembles on %d images", n_sub, len(idx))
    return EXIT_OK


@_exit_code
def cmd_report(eval_paths, out_dir, figures: bool = True) -> int:
    try:
        summary, long = merge(eval_paths)
    except (SchemaError, OSError) as exc:
        raise CommandError(EXIT_EVAL, f"report failed: {exc}") from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "summary.tsv", summary_tsv(summary).encode())
    atomic_write_bytes(out / "summary.jsonl", dumps_jsonl(summary))
    atomic_write_bytes(out / "plot_data.jsonl", dumps_jsonl(long))
    md = summary_markdown(summary)
    atomic_write_bytes(out / "summary.md", md.encode())
    if figures:
        from .plots import render_figures

        render_figures(long, out / "figures")
    print(md)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oen", description="Orthogonal ensemble training and evaluation.",
                                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("gen", "generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="overrides gen_params.seed")

    p = add("train", "train an ensemble sequentially")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--n-members", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="overrides train.seed (member k uses seed + k*10007)")
    p.add_argument("--workers", type=int, default=1,
                   help="threads for random/self_orth members (inter_orth is always sequential)")

    p = add("eval", "evaluate seeded sub-ensembles drawn from a trained pool")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sizes", default="1,3,5", help="comma-separated sub-ensemble sizes")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", help="dataset split (default: eval.split of the training config, else test)")
    p.add_argument("--variance-region", choices=("all", "foreground"),
                   help="pixels entering the prediction variance (default: from the training config, else all)")
    p.add_argument("--patch-size", type=int, help="sliding-window size (default: training patch size)")
    p.add_argument("--workers", type=int, default=1, help="threads scoring sub-ensembles")
    p.add_argument("--out", required=True)

    p = add("report", "merge eval files into tables, plot data and figures")
    p.add_argument("evals", nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "gen":
        return cmd_gen(args.config, args.out, args.seed)
    if args.command == "train":
        return cmd_train(args.config, args.dataset, args.mode, args.n_members, args.out, args.seed, args.workers)
    if args.command == "eval":
        try:
            sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
        except ValueError:
            print(f"oen eval: bad --sizes {args.sizes!r}", file=sys.stderr)
            return EXIT_CONFIG
        return cmd_eval(args.ensemble, args.dataset, sizes, args.repeats, args.seed, args.out,
                        args.split, args.variance_region, args.patch_size, args.workers)
    return cmd_report(args.evals, args.out, not args.no_figures)


if __name__ == "__main__":
    sys.exit(main())
