"""Run configuration files.

A config is a YAML mapping with up to five sections; every key is optional::

    gen_params:            # dataset generator, see data.GenParams
      profile: binary      # or multiclass; preset the remaining fields override
      seed: 0
    arch:                  # model.ArchConfig; channels/classes/head follow gen_params
      width: 8
      depth: 1
    train:                 # training.TrainConfig minus arch/ortho/mode
      epochs: 30
      foreground_prob: 0.9 # default 0.9 for 2 classes, (K-1)/K otherwise
    ortho:                 # ortho.OrthoConfig
      lambda: 0.1
      layers: all          # or a list of conv-layer indices
    eval:
      split: test
      variance_region: all # or foreground

Errors raise :class:`ConfigError` naming the field and, when known, its line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .data import PROFILES, GenParams, InfeasibleParamsError
from .model import ArchConfig
from .ortho import OrthoConfig
from .training import TrainConfig

SECTIONS = ("gen_params", "arch", "train", "ortho", "eval")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    variance_region: str = "all"

    def __post_init__(self):
        if self.variance_region not in ("all", "foreground"):
            raise ValueError("variance_region must be 'all' or 'foreground'")


@dataclass(frozen=True)
class RunConfig:
    gen: GenParams = field(default_factory=GenParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def snapshot(self) -> dict[str, Any]:
        """Plain-data view that ``parse_config`` accepts back."""
        return {"gen_params": dataclasses.asdict(self.gen),
                "arch": dataclasses.asdict(self.train.arch),
                "train": {k: v for k, v in dataclasses.asdict(self.train).items() if k not in ("arch", "ortho")},
                "ortho": {("lambda" if k == "lam" else k): v for k, v in dataclasses.asdict(self.train.ortho).items()},
                "eval": dataclasses.asdict(self.eval)}


def _line_index(node, path=(), out=None) -> dict[tuple, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _line_index(v, key, out)
    return out


def _build(cls, section: str, values: dict, lines: dict, aliases: dict | None = None, **fixed):
    """``aliases`` maps dataclass field names back to the spelling used in the file."""
    aliases = aliases or {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names or key in fixed:
            where = f" (line {lines[(section, key)]})" if (section, key) in lines else ""
            raise ConfigError(f"unknown field {section}.{key}{where}")
    try:
        return cls(**values, **fixed)
    except (TypeError, ValueError) as exc:
        bad = [k for k in values if k in str(exc) or aliases.get(k, k) in str(exc)]
        shown = aliases.get(bad[0], bad[0]) if bad else None
        where = f" (line {lines[(section, shown)]})" if bad and (section, shown) in lines else ""
        field_name = f"{section}.{shown}" if bad else section
        raise ConfigError(f"invalid {field_name}{where}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"YAML parse error{where}: {getattr(exc, 'problem', exc)}") from None
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    lines = _line_index(node) if node is not None else {}
    for sec, val in raw.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {sec!r} (line {lines.get((sec,), '?')}); expected {SECTIONS}")
        if val is not None and not isinstance(val, dict):
            raise ConfigError(f"section {sec!r} (line {lines.get((sec,), '?')}) must be a mapping")
    sec = {s: dict(raw.get(s) or {}) for s in SECTIONS}

    g = sec["gen_params"]
    profile = g.pop("profile", "binary")
    if profile not in PROFILES:
        raise ConfigError(f"unknown gen_params.profile {profile!r} (line {lines.get(('gen_params', 'profile'), '?')})")
    try:
        gen = PROFILES[profile](**g)
        gen.validate()
    except TypeError as exc:
        raise ConfigError(f"invalid gen_params: {exc}") from None
    except (InfeasibleParamsError, ValueError) as exc:
        bad = [k for k in g if k in str(exc)]
        name = f"gen_params.{bad[0]}" if bad else "gen_params"
        where = f" (line {lines[('gen_params', bad[0])]})" if bad and ('gen_params', bad[0]) in lines else ""
        raise ConfigError(f"invalid {name}{where}: {exc}") from None

    a = sec["arch"]
    a.setdefault("in_channels", gen.in_channels)
    a.setdefault("num_classes", gen.num_classes)
    a.setdefault("head", "sigmoid" if a["num_classes"] == 2 else "softmax")
    arch = _build(ArchConfig, "arch", a, lines)

    o = sec["ortho"]
    if "lam" in o:
        raise ConfigError(f"unknown field ortho.lam (line {lines.get(('ortho', 'lam'), '?')}); use 'lambda'")
    if "lambda" in o:
        o["lam"] = o.pop("lambda")
    if isinstance(o.get("layers"), list):
        o["layers"] = tuple(o["layers"])
    ortho = _build(OrthoConfig, "ortho", o, lines, aliases={"lam": "lambda"})

    t = sec["train"]
    t.setdefault("foreground_prob", 0.9 if gen.num_classes == 2 else (gen.num_classes - 1) / gen.num_classes)
    train = _build(TrainConfig, "train", t, lines, arch=arch, ortho=ortho)
    if train.patch_size > gen.image_size or train.patch_size % (2 ** arch.depth):
        raise ConfigError(f"train.patch_size {train.patch_size} must be <= image_size {gen.image_size} "
                          f"and divisible by {2 ** arch.depth}")
    ev = _build(EvalConfig, "eval", sec["eval"], lines)
    return RunConfig(gen, train, ev)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def with_seed(cfg: RunConfig, seed: int | None, target: str) -> RunConfig:
    """Route a command-line ``--seed`` into the generator or the trainer."""
    if seed is None:
        return cfg
    if target == "gen":
        return replace(cfg, gen=replace(cfg.gen, seed=seed))
    return replace(cfg, train=replace(cfg.train, seed=seed))
