"""Sequential ensemble training with orthogonality penalties.

Member ``k`` of an ensemble is initialized and fed data from
``seed = base_seed + k * MEMBER_SEED_STRIDE``. In ``inter_orth`` mode its
objective also references the frozen weights of members ``0..k-1``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import container
from . import tensor as T
from .data import SynthDataset, sample_patches, stack_patches
from .losses import SEG_LOSSES
from .model import ArchConfig, FingerprintMismatchError, SegNet
from .ortho import OrthoConfig, ortho_terms

logger = logging.getLogger(__name__)

MODES = ("random", "self_orth", "inter_orth")
MEMBER_SEED_STRIDE = 10007


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {step}")
        self.epoch, self.step, self.value = epoch, step, value


@dataclass(frozen=True)
class TrainConfig:
    """One member's training run.

    Desk-scale defaults: 32x32 patches and batch 16 stand in for 64^3
    patches and batch 64; an epoch is ``steps_per_epoch`` sampled batches.
    """

    mode: str = "inter_orth"
    arch: ArchConfig = field(default_factory=ArchConfig)
    ortho: OrthoConfig = field(default_factory=OrthoConfig)
    seg_loss: str = "soft_dice"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 0.85
    lr_decay_every: int = 10
    epochs: int = 30
    steps_per_epoch: int = 20
    batch_size: int = 16
    patch_size: int = 32
    foreground_prob: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.seg_loss not in SEG_LOSSES:
            raise ValueError(f"seg_loss must be one of {sorted(SEG_LOSSES)}, got {self.seg_loss!r}")
        if not 0.0 <= self.foreground_prob <= 1.0:
            raise ValueError("foreground_prob must lie in [0, 1]")
        if min(self.epochs, self.steps_per_epoch, self.batch_size, self.patch_size, self.lr_decay_every) < 1:
            raise ValueError("epochs, steps_per_epoch, batch_size, patch_size, lr_decay_every must be >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be > 0 and lr_decay in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    @property
    def penalty_weights(self) -> tuple[float, float]:
        """Effective (self, inter) weights for this mode."""
        if self.mode == "random":
            return 0.0, 0.0
        if self.mode == "self_orth":
            return self.ortho.self_weight, 0.0
        return self.ortho.self_weight, self.ortho.inter_weight

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def for_member(self, k: int) -> "TrainConfig":
        return replace(self, seed=self.seed + k * MEMBER_SEED_STRIDE)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    seg_loss: float
    self_orth: float
    inter_orth: float
    penalty: float


@dataclass
class TrainingLog:
    """Per-epoch means over the epoch's batches; ortho terms are the weighted
    values that entered the objective. ``initial`` holds them at initialization."""

    member_index: int
    mode: str
    seed: int
    lam: float
    initial: dict[str, float] = field(default_factory=dict)
    epochs: list[EpochRecord] = field(default_factory=list)

    def records(self) -> list[dict]:
        base = {"member_index": self.member_index, "mode": self.mode, "seed": self.seed, "lambda": self.lam}
        rows = [{"record": "train_init", **base, **self.initial}]
        rows += [{"record": "train_epoch", **base, **asdict(e)} for e in self.epochs]
        return rows


def _data_seed(member_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([member_seed, epoch]).generate_state(1)[0])


def _penalty(net, prev, cfg: TrainConfig):
    ws, wi = cfg.penalty_weights
    if ws == 0.0 and wi == 0.0:
        zero = T.Tensor._wrap(np.zeros(()))
        return zero, zero
    s, i = ortho_terms(net, prev if wi > 0 else [], cfg.ortho)
    return ws * s, wi * i


def train_member(cfg: TrainConfig, dataset: SynthDataset, prev: Sequence[SegNet] = (),
                 member_index: int = 0) -> tuple[SegNet, TrainingLog]:
    """Train one member from scratch with seed ``cfg.seed``; ``prev`` stays untouched."""
    prev = list(prev)
    if prev and cfg.mode != "inter_orth":
        raise ValueError(f"previous members are only used in inter_orth mode, got mode {cfg.mode!r}")
    net = SegNet.build(cfg.arch, seed=cfg.seed)
    for k, p in enumerate(prev):
        if p.fingerprint != net.fingerprint:
            raise FingerprintMismatchError(f"previous member {k} has a different architecture")
    if dataset.params.in_channels != cfg.arch.in_channels or dataset.num_classes != cfg.arch.num_classes:
        raise ValueError("dataset channels/classes do not match the architecture")

    seg_fn = SEG_LOSSES[cfg.seg_loss]
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    log = TrainingLog(member_index, cfg.mode, cfg.seed, cfg.ortho.lam)
    s0, i0 = _penalty(net, prev, cfg)
    log.initial = {"self_orth": s0.item(), "inter_orth": i0.item(), "penalty": s0.item() + i0.item()}

    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        patches = sample_patches(dataset, "train", cfg.patch_size, cfg.foreground_prob,
                                 cfg.steps_per_epoch * cfg.batch_size, _data_seed(cfg.seed, epoch))
        sums = np.zeros(3)
        for step in range(cfg.steps_per_epoch):
            xb, yb = stack_patches(patches[step * cfg.batch_size:(step + 1) * cfg.batch_size])
            with T.GradTape() as tape:
                seg = seg_fn(net(xb), yb).value
                s_pen, i_pen = _penalty(net, prev, cfg)
                total = seg + s_pen + i_pen
            value = total.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, step, value)
            grads = tape.backward(total)
            params = net.parameters()
            net.set_parameters(opt.step([p.data for p in params], [grads[p].data for p in params]))
            sums += (seg.item(), s_pen.item(), i_pen.item())
        means = sums / cfg.steps_per_epoch
        log.epochs.append(EpochRecord(epoch, opt.lr, *(float(v) for v in means), float(means[1] + means[2])))
        logger.debug("member %d epoch %d seg %.4f self %.4f inter %.4f", member_index, epoch, *means)
    return net, log


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class MemberMeta:
    index: int
    mode: str
    seed: int
    lam: float


@dataclass
class Ensemble:
    members: list[SegNet]
    meta: list[MemberMeta]
    logs: list[TrainingLog] = field(default_factory=list, compare=False)
    info: dict = field(default_factory=dict, compare=False)  # free-form, stored in the container

    def __post_init__(self):
        if len(self.members) != len(self.meta):
            raise ValueError("members and meta differ in length")
        fps = {m.fingerprint for m in self.members}
        if len(fps) > 1:
            raise FingerprintMismatchError(f"ensemble members have different architectures: {sorted(fps)}")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def arch(self) -> ArchConfig:
        return self.members[0].arch

    def subset(self, indices: Sequence[int]) -> "Ensemble":
        return Ensemble([self.members[i] for i in indices], [self.meta[i] for i in indices])

    def predict(self, image: np.ndarray) -> np.ndarray:
        return ensemble_predict(self, image)

    def save(self, path) -> None:
        save_ensemble(self, path)


def build_ensemble(cfg_base: TrainConfig, dataset: SynthDataset, n_members: int, workers: int = 1,
                   on_member: Callable[[int, SegNet, TrainingLog], None] | None = None) -> Ensemble:
    """Train ``n_members`` members. ``workers > 1`` parallelizes the
    independent modes; ``inter_orth`` is always sequential."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    cfgs = [cfg_base.for_member(k) for k in range(n_members)]
    results: list[tuple[SegNet, TrainingLog]] = []
    if cfg_base.mode != "inter_orth" and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(train_member, c, dataset, [], k) for k, c in enumerate(cfgs)]
            results = [f.result() for f in futures]
        if on_member:
            for k, (net, log) in enumerate(results):
                on_member(k, net, log)
    else:
        for k, c in enumerate(cfgs):
            prev = [r[0] for r in results] if cfg_base.mode == "inter_orth" else []
            net, log = train_member(c, dataset, prev, k)
            results.append((net, log))
            if on_member:
                on_member(k, net, log)
    meta = [MemberMeta(k, c.mode, c.seed, c.ortho.lam) for k, c in enumerate(cfgs)]
    return Ensemble([r[0] for r in results], meta, [r[1] for r in results])


def ensemble_predict(ens: Ensemble, image: np.ndarray) -> np.ndarray:
    """Arithmetic mean of member probability maps."""
    maps = [m.predict(image) for m in ens.members]
    return np.mean(maps, axis=0) if len(maps) > 1 else maps[0]


def merge_ensembles(a: Ensemble, b: Ensemble) -> Ensemble:
    if a.members and b.members and a.members[0].fingerprint != b.members[0].fingerprint:
        raise FingerprintMismatchError("cannot merge ensembles with different architectures")
    return Ensemble(a.members + b.members, a.meta + b.meta)


def save_ensemble(ens: Ensemble, path) -> None:
    """Container with ``member{k}.layer{i}.weight|bias`` arrays in member order.

    ``ens.info`` is stored under the header's ``info`` key.
    """
    arrays = {}
    for k, m in enumerate(ens.members):
        for name, arr in m.state_arrays().items():
            arrays[f"member{k}.{name}"] = arr
    meta = {"kind": "ensemble", "arch": asdict(ens.arch), "arch_fingerprint": ens.members[0].fingerprint,
            "members": [asdict(m) for m in ens.meta], "info": ens.info}
    container.write(path, meta, arrays)


def load_ensemble(path) -> Ensemble:
    meta, arrays = container.read(path)
    if meta.get("kind") != "ensemble":
        raise container.CorruptFileError(f"expected an ensemble container, got {meta.get('kind')!r}", 16)
    arch = ArchConfig(**meta["arch"])
    members, metas = [], []
    for k, mm in enumerate(meta["members"]):
        net = SegNet.build(arch, seed=None)
        net.load_state_arrays({n[len(f"member{k}."):]: a for n, a in arrays.items()
                               if n.startswith(f"member{k}.")})
        if net.fingerprint != meta["arch_fingerprint"]:
            raise FingerprintMismatchError(f"member {k} does not match the stored architecture")
        members.append(net)
        metas.append(MemberMeta(**mm))
    return Ensemble(members, metas, info=meta.get("info", {}))
