"""Squared-cosine orthogonality penalties on convolutional filter banks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import FilterBank, FingerprintMismatchError, SegNet, extract_filter_banks
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class OrthoConfig:
    """Penalty weighting.

    ``layers`` is ``"all"`` or a tuple of conv-layer indices. ``lambda_self``
    and ``lambda_inter`` override ``lam`` per term (experimental; default
    both follow ``lam``).
    """

    lam: float = 0.1
    epsilon: float = 1e-12
    layers: str | tuple[int, ...] = "all"
    lambda_self: float | None = None
    lambda_inter: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        for v in (self.lambda_self, self.lambda_inter):
            if v is not None and v < 0:
                raise ValueError("per-term lambdas must be >= 0")
        if self.layers != "all":
            object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))

    @property
    def self_weight(self) -> float:
        return self.lam if self.lambda_self is None else self.lambda_self

    @property
    def inter_weight(self) -> float:
        return self.lam if self.lambda_inter is None else self.lambda_inter

    def selected(self, n_layers: int) -> list[int]:
        if self.layers == "all":
            return list(range(n_layers))
        bad = [i for i in self.layers if not 0 <= i < n_layers]
        if bad:
            raise IndexError(f"layer indices {bad} out of range for a {n_layers}-layer net")
        return sorted(set(self.layers))


def cosine_similarity(u, v, eps: float = 1e-12) -> Tensor:
    """<u,v> / (|u||v|); zero when either norm is below ``eps``."""
    u, v = T.as_tensor(u), T.as_tensor(v)
    if u.size == 0 or v.size == 0:
        raise ShapeError("cosine_similarity of an empty vector")
    if u.size != v.size:
        raise ShapeError(f"cosine_similarity length mismatch: {u.size} vs {v.size}")
    uh = T.normalize_rows(T.reshape(u, (1, -1)), eps)
    vh = T.normalize_rows(T.reshape(v, (1, -1)), eps)
    return T.tsum(uh * vh)


def _vectors(bank) -> Tensor:
    return bank.vectors if isinstance(bank, FilterBank) else T.as_tensor(bank)


def self_orth_loss(bank, eps: float = 1e-12) -> Tensor:
    """Half the sum of squared cosine similarities over ordered pairs i != j."""
    w = _vectors(bank)
    n = w.shape[0]
    if n < 2:
        return T.tsum(w * 0.0)
    u = T.normalize_rows(w, eps)
    gram = u @ u.T
    off_diag = 1.0 - np.eye(n)
    return 0.5 * T.tsum(T.square(gram * off_diag))


def inter_orth_loss(bank, prev_banks: Sequence, eps: float = 1e-12) -> Tensor:
    """Mean over previous banks of the summed squared cross-model cosines (i = j included).

    ``prev_banks`` are treated as constants. Returns 0 when empty.
    """
    w = _vectors(bank)
    if not prev_banks:
        return T.tsum(w * 0.0)
    for k, pb in enumerate(prev_banks):
        pv = _vectors(pb)
        if pv.ndim != 2 or pv.shape[1] != w.shape[1]:
            raise ShapeError(f"previous bank {k} has shape {pv.shape}; expected [*, {w.shape[1]}]")
        if isinstance(bank, FilterBank) and isinstance(pb, FilterBank) and pb.layer_index != bank.layer_index:
            raise ShapeError(f"previous bank {k} is from layer {pb.layer_index}, "
                             f"expected layer {bank.layer_index}")
    u = T.normalize_rows(w, eps)
    total = None
    for pb in prev_banks:
        # previous members are frozen: constants, never on the tape
        pu = T.normalize_rows(Tensor._wrap(_vectors(pb).data), eps)
        cross = T.tsum(T.square(u @ pu.T))
        total = cross if total is None else total + cross
    return total * (1.0 / len(prev_banks))


def ortho_terms(net: SegNet, prev_nets: Sequence[SegNet], cfg: OrthoConfig) -> tuple[Tensor, Tensor]:
    """Unweighted (self, inter) sums over the selected layers."""
    for k, p in enumerate(prev_nets):
        if p.fingerprint != net.fingerprint:
            raise FingerprintMismatchError(
                f"previous net {k} has fingerprint {p.fingerprint}, expected {net.fingerprint}")
    banks = extract_filter_banks(net)
    prev = [extract_filter_banks(p) for p in prev_nets]
    s_total = i_total = Tensor._wrap(np.zeros(()))
    for l in cfg.selected(len(banks)):
        s_total = s_total + self_orth_loss(banks[l], cfg.epsilon)
        i_total = i_total + inter_orth_loss(banks[l], [pb[l] for pb in prev], cfg.epsilon)
    return s_total, i_total


def total_ortho_penalty(net: SegNet, prev_nets: Sequence[SegNet], cfg: OrthoConfig) -> Tensor:
    """lambda * sum over selected layers of (self + inter)."""
    s, i = ortho_terms(net, prev_nets, cfg)
    return cfg.self_weight * s + cfg.inter_weight * i
