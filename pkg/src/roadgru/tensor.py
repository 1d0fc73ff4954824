"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every differentiable operation whose output depends
on a watched tensor.  Operations are plain functions of their inputs and
never mutate them; the tape is the only stateful object and is meant to live
for a single training step.

Shapes follow image convention: feature maps are ``(H, W, C)`` or batched
``(N, H, W, C)``, convolution kernels are ``(kh, kw, Cin, Cout)``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "as_tensor",
    "conv2d",
    "conv_output_shape",
    "dense",
    "activation",
    "sigmoid",
    "tanh",
    "relu",
    "upsample_linear_1d",
    "interpolation_matrix",
    "concat",
    "stack",
    "take",
    "flip",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable n-d array, optionally tracked by a :class:`Tape`."""

    __slots__ = ("data", "tape", "name", "requires_grad")

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, *, tape: "Tape | None" = None, name: str | None = None,
                 requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.tape = tape
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def abs(self) -> "Tensor":
        return absolute(self)

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], VJP]] = []
        self._leaves: dict[str, Tensor] = {}
        self._ids: set[int] = set()
        self._counter = itertools.count()

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, data, name: str | None = None) -> Tensor:
        """Register ``data`` as a trainable leaf and return its tracked tensor."""
        if name is None:
            name = f"leaf{next(self._counter)}"
        if name in self._leaves:
            raise ValueError(f"leaf name {name!r} already on tape")
        t = Tensor(data.data if isinstance(data, Tensor) else data,
                   tape=self, name=name, requires_grad=True)
        self._leaves[name] = t
        self._ids.add(id(t))
        return t

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: VJP) -> None:
        self._nodes.append((out, parents, vjp))
        self._ids.add(id(out))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. every watched leaf, by name.

        The tape is consumed: its recorded graph is dropped afterwards.
        """
        return backward(self, loss)

    def release(self) -> None:
        """Forget every recorded node and leaf.

        Tensors and their tape reference each other, so without this the
        activations of a step linger until the cycle collector runs.
        """
        self._nodes = []
        self._leaves = {}
        self._ids = set()


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape or id(loss) not in tape._ids:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, vjp in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for name, leaf in tape._leaves.items():
        g = grads.get(id(leaf))
        out[name] = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
    tape.release()
    return out


# ---------------------------------------------------------------------------
# op plumbing


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.requires_grad:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands are tracked by different tapes")
            tape = t.tape
    return tape


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    out = Tensor(data, tape=tape, requires_grad=True)
    tape.record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1]) if a.ndim > 1 \
            else np.outer(a.data, g)
        return ga, gb

    return _make(out, (a, b), vjp)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis) * (1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), vjp)


def take(a: Tensor, i: int, axis: int) -> Tensor:
    """Slice position ``i`` out of ``axis`` (the axis is dropped)."""
    out = np.take(a.data, i, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.ndim
        idx[axis] = i
        full[tuple(idx)] = g
        return (full,)

    return _make(out, (a,), vjp)


def flip(a: Tensor, axis: int) -> Tensor:
    return _make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot stack shapes {[t.shape for t in tensors]}") from exc
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(as_tensor(x))


# ---------------------------------------------------------------------------
# layers


def conv_output_shape(h: int, w: int, kh: int, kw: int,
                      stride=(1, 1), padding=(0, 0)) -> tuple[int, int]:
    sh, sw = stride
    ph, pw = padding
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Strided view (N, Ho, Wo, kh, kw, C) over a padded batch."""
    n, _, _, c = xp.shape
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, kh, kw, c),
        strides=(s[0], s[1] * sh, s[2] * sw, s[1], s[2], s[3]), writeable=False)


def conv2d(x, kernel, bias, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``(H, W, Cin)`` or ``(N, H, W, Cin)``; ``kernel`` is
    ``(kh, kw, Cin, Cout)``; ``bias`` is ``(Cout,)``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (N,)H,W,C input and 4-d kernel, got {x.shape}, {kernel.shape}")
    n, h, w, cin = xd.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match Cout={cout}")
    sh, sw = stride
    ph, pw = padding
    ho, wo = conv_output_shape(h, w, kh, kw, stride, padding)

    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else xd
    if kh == kw == 1 and sh == sw == 1:
        cols = xp.reshape(n * ho * wo, cin)
    else:
        cols = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat + bias.data).reshape(n, ho, wo, cout)
    if unbatched:
        out = out[0]

    def vjp(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, dy:dy + sh * (ho - 1) + 1:sh, dx:dx + sw * (wo - 1) + 1:sw, :] += \
                        dcols[:, :, :, dy, dx, :]
            gx = gxp[:, ph:ph + h, pw:pw + w, :]
            if unbatched:
                gx = gx[0]
        return gx, gk, gb

    return _make(out, (x, kernel, bias), vjp)


def dense(x, weight, bias) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    return add(matmul(x, weight), bias)


def interpolation_matrix(n: int, m: int, dtype=np.float64) -> np.ndarray:
    """(m, n) matrix of endpoint-aligned linear interpolation weights."""
    if n < 2:
        raise ShapeError(f"linear upsampling needs at least 2 samples, got {n}")
    if m < n:
        raise ShapeError(f"target length {m} shorter than input length {n}")
    pos = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    mat = np.zeros((m, n), dtype=dtype)
    rows = np.arange(m)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def upsample_linear_1d(x, target_len: int) -> Tensor:
    """Linearly resample the last axis to ``target_len`` with aligned endpoints."""
    x = as_tensor(x)
    mat = interpolation_matrix(x.shape[-1], target_len, x.dtype)
    return matmul(x, Tensor(mat.T))

