"""Dense float64 tensors with a tape-based reverse-mode autodiff.

A :class:`GradTape` is activated with a ``with`` block. While it is active,
every operation whose inputs include a watched or tape-produced tensor is
recorded; :meth:`GradTape.backward` then replays the records in reverse.
Outside a tape, operations just compute values.

Kernel vectorization (see :func:`flatten_rows`) uses numpy's C (row-major)
order: a ``[n, C, kh, kw]`` weight becomes ``[n, C*kh*kw]`` with the last
axis varying fastest.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    """An immutable float64 array that can take part in a :class:`GradTape`.

    ``requires_grad`` marks the tensor as a parameter: it is watched
    automatically by any tape it is used on.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    # make ``ndarray op Tensor`` dispatch to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path for freshly computed arrays, no copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=DTYPE))


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Records differentiable operations for one backward pass.

    Tapes are thread-local. A tape can be consumed by :meth:`backward` once;
    make a new one per training step.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._params: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._params[id(t)] = t
            self._tracked.add(id(t))

    @property
    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def _is_tracked(self, t: Tensor) -> bool:
        if t.requires_grad and id(t) not in self._params:
            self.watch(t)
        return id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        """Gradients of a scalar ``loss`` for every watched parameter.

        Parameters the loss does not depend on get a zero gradient.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward call")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or id(t) not in self._tracked:
                    continue
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi
        self._records.clear()

        result = {}
        for pid, p in self._params.items():
            g = grads.get(pid)
            if g is None:
                g = np.zeros_like(p.data)
            result[p] = Tensor._wrap(np.broadcast_to(g, p.shape).copy())
        return result


def backward(loss: Tensor, tape: GradTape | None = None) -> dict[Tensor, Tensor]:
    tape = tape or active_tape()
    if tape is None:
        raise TapeError("no active tape")
    return tape.backward(loss)


def _op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None:
        if any([tape._is_tracked(t) for t in inputs]):
            tape._record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data - b.data, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data * b.data, (a, b),
               lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _op(out, (a, b),
               lambda g: (_unbroadcast(g / b.data, a.shape),
                          _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    if exponent == 2.0:
        return _op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))
    return _op(a.data ** exponent, (a,),
               lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def square(a) -> Tensor:
    return power(a, 2.0)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _op(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _op(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _op(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k]@[k,n], got {a.shape} @ {b.shape}")
    return _op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def flatten_rows(w) -> Tensor:
    """Vectorize ``[n, ...]`` into ``[n, d]`` in row-major order."""
    w = as_tensor(w)
    return reshape(w, (w.shape[0], -1))


def normalize_rows(w, eps: float = 1e-12) -> Tensor:
    """Scale each row of ``[n, d]`` to unit norm.

    Rows with norm below ``eps`` map to zero and pass no gradient.
    """
    w = as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"normalize_rows needs a 2-D tensor, got shape {w.shape}")
    norms = np.sqrt((w.data * w.data).sum(axis=1, keepdims=True))
    live = norms >= eps
    inv = np.where(live, 1.0 / np.where(live, norms, 1.0), 0.0)
    out = w.data * inv

    def bw(g):
        radial = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * radial) * inv,)

    return _op(out, (w,), bw)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; ``weight`` is
    ``[n, C_in, kh, kw]``; ``bias`` is ``[n]`` or None. Zero padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [n,C_in,kh,kw], got {weight.shape}")
    xd = x.data[None] if unbatched else x.data
    B, C, H, W = xd.shape
    n, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has C_in={C}, weight expects C_in={Cw}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (n,):
            raise ShapeError(f"conv2d bias must have shape ({n},), got {bias.shape}")

    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # im2col: rows follow the row-major kernel order (c, p, q), columns are output pixels (b, i, j)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, B * Ho * Wo)
    wmat = weight.data.reshape(n, C * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(n, B, Ho, Wo).transpose(1, 0, 2, 3))
    if unbatched:
        out = out[0]

    tape = active_tape()
    need_gx = tape is not None and tape._is_tracked(x)

    def bw(g):
        gb = g[None] if unbatched else g
        g2 = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(n, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb_ = g2.sum(axis=1) if bias is not None else None
        if not need_gx:
            return [None, gw, gb_]
        gcols = (wmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
        gxp = np.zeros((C, B, Hp, Wp))
        for p in range(kh):
            for q in range(kw):
                gxp[:, :, p : p + (Ho - 1) * stride + 1 : stride,
                    q : q + (Wo - 1) * stride + 1 : stride] += gcols[:, p, q]
        gx = gxp[:, :, padding : padding + H, padding : padding + W].transpose(1, 0, 2, 3)
        gx = gx[0] if unbatched else np.ascontiguousarray(gx)
        return [gx, gw, gb_]

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _op(out, inputs, bw)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        shp = g.shape[:-2] + (g.shape[-2] // 2, 2, g.shape[-1] // 2, 2)
        return (g.reshape(shp).sum(axis=(-3, -1)),)

    return _op(out, (x,), bw)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(loss_fn: Callable[[Tensor], Tensor | float], param, h: float = 1e-5,
                     coords: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``param``.

    ``coords`` restricts the estimate to the listed flat indices; the
    remaining entries of the result are left at zero.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    base = np.array(param.data if isinstance(param, Tensor) else param, dtype=DTYPE)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords

    def evaluate(arr):
        val = loss_fn(Tensor(arr))
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not np.isfinite(val):
            raise FloatingPointError("loss_fn returned a non-finite value")
        return val

    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(base)
        flat[i] = orig - h
        down = evaluate(base)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(base.shape)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
