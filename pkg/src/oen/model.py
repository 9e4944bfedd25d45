"""Small residual encoder-decoder used as the ensemble member network.

Layer stack for ``depth`` levels (``w_i = width * 2**i``)::

    stem     3x3 conv  in_channels -> w_0, relu
    down_i   3x3 conv stride 2  w_{i-1} -> w_i, relu      i = 1..depth
    res_i    3x3 conv  w_i -> w_i, relu, added to down_i output
    up_i     3x3 conv  w_i -> w_{i-1}, relu, 2x nearest upsample,
             added to the encoder feature at level i-1    i = depth..1
    head     1x1 conv  w_0 -> num_classes (softmax) or 1 (sigmoid)

Spatial extents must be divisible by ``2**depth``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import tensor as T
from .tensor import ShapeError, Tensor

HEADS = ("softmax", "sigmoid")


class ChannelMismatchError(ShapeError):
    pass


class FingerprintMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 2
    num_classes: int = 2
    head: str = "sigmoid"
    width: int = 8
    depth: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.head == "sigmoid" and self.num_classes != 2:
            raise ValueError("a sigmoid head needs num_classes == 2")
        if self.in_channels < 1 or self.width < 1 or self.depth < 0:
            raise ValueError("in_channels, width must be >= 1 and depth >= 0")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")

    @property
    def out_channels(self) -> int:
        return self.num_classes if self.head == "softmax" else 1

    def layer_specs(self) -> list[dict]:
        """(role, c_in, c_out, kernel, stride, padding, activation) for every conv."""
        k, pad = self.kernel_size, self.kernel_size // 2
        widths = [self.width * 2 ** i for i in range(self.depth + 1)]
        specs = [dict(role="stem", c_in=self.in_channels, c_out=widths[0], kernel=k, stride=1,
                      padding=pad, activation="relu")]
        for i in range(1, self.depth + 1):
            specs.append(dict(role=f"down{i}", c_in=widths[i - 1], c_out=widths[i], kernel=k,
                              stride=2, padding=pad, activation="relu"))
            specs.append(dict(role=f"res{i}", c_in=widths[i], c_out=widths[i], kernel=k,
                              stride=1, padding=pad, activation="relu"))
        for i in range(self.depth, 0, -1):
            specs.append(dict(role=f"up{i}", c_in=widths[i], c_out=widths[i - 1], kernel=k,
                              stride=1, padding=pad, activation="relu"))
        specs.append(dict(role="head", c_in=widths[0], c_out=self.out_channels, kernel=1,
                          stride=1, padding=0, activation="none"))
        return specs


@dataclass
class ConvLayer:
    role: str
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int
    activation: str

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        return T.relu(y) if self.activation == "relu" else y


@dataclass
class FilterBank:
    """Kernels of one conv layer, one row-major flattened kernel per row."""

    layer_index: int
    vectors: Tensor

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass
class SegNet:
    arch: ArchConfig
    layers: list[ConvLayer] = field(default_factory=list)

    @classmethod
    def build(cls, arch: ArchConfig, seed: int | None = 0) -> "SegNet":
        layers = []
        for s in arch.layer_specs():
            layers.append(ConvLayer(
                role=s["role"],
                weight=Tensor(np.zeros((s["c_out"], s["c_in"], s["kernel"], s["kernel"])),
                              requires_grad=True),
                bias=Tensor(np.zeros(s["c_out"]), requires_grad=True),
                stride=s["stride"], padding=s["padding"], activation=s["activation"]))
        net = cls(arch, layers)
        if seed is not None:
            init_weights(net, seed)
        return net

    @property
    def fingerprint(self) -> str:
        return arch_fingerprint(self)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def set_parameters(self, values) -> None:
        values = list(values)
        if len(values) != 2 * len(self.layers):
            raise ValueError("wrong number of parameter arrays")
        for i, layer in enumerate(self.layers):
            w, b = values[2 * i], values[2 * i + 1]
            w = w.data if isinstance(w, Tensor) else w
            b = b.data if isinstance(b, Tensor) else b
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"layer {i} ({layer.role}): shape mismatch on assignment")
            layer.weight = Tensor(w, requires_grad=True)
            layer.bias = Tensor(b, requires_grad=True)

    def copy(self) -> "SegNet":
        net = SegNet.build(self.arch, seed=None)
        net.set_parameters(self.parameters())
        return net

    def weight_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in self.parameters())

    def weight_digest(self) -> str:
        return hashlib.sha256(self.weight_bytes()).hexdigest()

    def forward(self, image) -> Tensor:
        return forward(self, image)

    __call__ = forward

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Probability map as a plain array; nothing is recorded on any tape."""
        return forward(self, Tensor._wrap(np.asarray(image, dtype=np.float64))).data.copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.weight"] = layer.weight.data
            out[f"layer{i}.bias"] = layer.bias.data
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        vals = []
        for i in range(len(self.layers)):
            vals += [arrays[f"layer{i}.weight"], arrays[f"layer{i}.bias"]]
        self.set_parameters(vals)


def arch_fingerprint(net: SegNet) -> str:
    shapes = [[list(l.weight.shape), list(l.bias.shape), l.stride, l.padding, l.activation]
              for l in net.layers]
    canon = json.dumps({"head": net.arch.head, "layers": shapes}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def forward(net: SegNet, image) -> Tensor:
    """Per-pixel class probabilities for ``[C_in,H,W]`` or ``[B,C_in,H,W]`` input."""
    x = T.as_tensor(image)
    c_axis = 0 if x.ndim == 3 else 1
    if x.ndim not in (3, 4) or x.shape[c_axis] != net.arch.in_channels:
        raise ChannelMismatchError(
            f"image has shape {x.shape}; net expects {net.arch.in_channels} input channels")
    step = 2 ** net.arch.depth
    if x.shape[-1] % step or x.shape[-2] % step:
        raise ShapeError(f"spatial extents {x.shape[-2:]} must be divisible by {step}")

    layers = iter(net.layers)
    h = next(layers)(x)
    skips = [h]
    for i in range(net.arch.depth):
        d = next(layers)(h)
        h = d + next(layers)(d)
        skips.append(h)
    for i in range(net.arch.depth, 0, -1):
        h = T.upsample2x(next(layers)(h)) + skips[i - 1]
    logits = next(layers)(h)
    if net.arch.head == "softmax":
        return T.softmax(logits, axis=c_axis)
    return T.sigmoid(logits)


def init_weights(net: SegNet, seed: int) -> SegNet:
    """He-normal kernels (std = sqrt(2 / fan_in), fan_in = C_in*kh*kw), zero biases."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        n, c, kh, kw = layer.weight.shape
        std = np.sqrt(2.0 / (c * kh * kw))
        layer.weight = Tensor(rng.normal(0.0, std, size=(n, c, kh, kw)), requires_grad=True)
        layer.bias = Tensor(np.zeros(n), requires_grad=True)
    return net


def extract_filter_banks(net: SegNet) -> list[FilterBank]:
    """One bank per conv layer, in layer order; rows stay differentiable w.r.t. the weights."""
    return [FilterBank(i, T.flatten_rows(layer.weight)) for i, layer in enumerate(net.layers)]


def write_filter_bank(net: SegNet, bank: FilterBank) -> None:
    layer = net.layers[bank.layer_index]
    vec = bank.vectors.data
    if vec.shape != (layer.weight.shape[0], int(np.prod(layer.weight.shape[1:]))):
        raise ShapeError(f"bank shape {vec.shape} does not fit layer {bank.layer_index} "
                         f"with weight shape {layer.weight.shape}")
    layer.weight = Tensor(vec.reshape(layer.weight.shape), requires_grad=True)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: SegNet, **meta) -> None:
    """Write one net. ``meta`` typically carries seed, mode, lambda, member_index."""
    header = {"kind": "segnet", "arch": asdict(net.arch), "arch_fingerprint": net.fingerprint, **meta}
    container.write(path, header, net.state_arrays())


def load_checkpoint(path) -> tuple[SegNet, dict]:
    meta, arrays = container.read(path)
    if meta.get("kind") != "segnet":
        raise container.CorruptFileError(f"expected a segnet checkpoint, got {meta.get('kind')!r}", 16)
    net = SegNet.build(ArchConfig(**meta["arch"]), seed=None)
    net.load_state_arrays(arrays)
    if net.fingerprint != meta["arch_fingerprint"]:
        raise FingerprintMismatchError("checkpoint fingerprint does not match its stored arch")
    return net, meta
