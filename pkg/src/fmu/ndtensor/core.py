"""Dense real tensors and a tape-based reverse-mode differentiation engine.

Every differentiable computation in the package goes through :func:`forward_op`.
When recording is enabled and at least one input requires a gradient, the op
appends a :class:`TapeNode` to the global tape. :func:`backward` walks the tape
in reverse (the append order is already a topological order) and accumulates
gradients into a :class:`~fmu.ndtensor.params.ParamStore`.

Layout conventions used by the image ops: ``[batch, X, Y, channels]``
(channels last, matching the ``[W, H, bands]`` cube layout).
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE: type = np.float64 if os.environ.get("FMU_VERIFY") == "1" else np.float32


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised by explicit finiteness checks."""


def default_dtype() -> type:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default float type (``np.float64`` for verification)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """Immutable n-d array of reals, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # op outputs: no copy, only a dtype fix-up
        arr = np.asarray(arr)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        elif arr.flags.writeable:
            arr = arr.view()
        arr.flags.writeable = False
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(t, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    attrs: dict[str, Any] = field(default_factory=dict)

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(id(t) for t in self.inputs)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.output.shape


class Tape:
    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.enabled = True

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    """Disable recording; ops run as plain numpy computations."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


# ---------------------------------------------------------------------------
# op registry

# kind -> fn(*arrays, **attrs) -> (out_array, backward(grad_out) -> grads)
_OPS: dict[str, Callable] = {}


def register(kind: str):
    def deco(fn):
        _OPS[kind] = fn
        return fn

    return deco


def op_kinds() -> list[str]:
    return sorted(_OPS)


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Apply a registered op and record it on the tape when needed."""
    try:
        impl = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    tensors = tuple(as_tensor(x) for x in inputs)
    out_data, bwd = impl(*(t.data for t in tensors), **attrs)
    track = _TAPE.enabled and any(t.requires_grad for t in tensors)
    out = Tensor._wrap(out_data, track)
    if track:
        _TAPE.nodes.append(TapeNode(kind, tensors, out, bwd, attrs))
    return out


def backward(loss: Tensor, params) -> None:
    """Accumulate d(loss)/d(p) into every trainable entry of ``params``; clears the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _TAPE.nodes:
        raise RuntimeError("backward called with an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(_TAPE.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for entry in params.entries():
            if not entry.trainable:
                continue
            g = grads.get(id(entry.value))
            if g is not None:
                entry.grad += g.reshape(entry.grad.shape)
    finally:
        _TAPE.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


@register("add")
def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@register("sub")
def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))


@register("mul")
def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@register("scale")
def _scale(a, *, factor):
    f = a.dtype.type(factor)
    return a * f, lambda g: (g * f,)


@register("relu")
def _relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


_GELU_C = float(np.sqrt(2.0 / np.pi))


@register("gelu")
def _gelu(a):
    # tanh approximation
    a2 = a * a
    th = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2))
    out = 0.5 * a * (1.0 + th)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a2)
        return (g * (0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * d_inner),)

    return out, bwd


@register("sigmoid")
def _sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a))
    return out, lambda g: (g * out * (1.0 - out),)


@register("abs")
def _abs(a):
    return np.abs(a), lambda g: (g * np.sign(a),)


@register("clamp")
def _clamp(a, *, lo, hi):
    inside = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), lambda g: (g * inside,)


@register("layer_norm")
def _layer_norm(a, *, eps=1e-5):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return xhat, bwd


# ---------------------------------------------------------------------------
# linear algebra and reductions


@register("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, bwd


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


@register("sum")
def _sum(a, *, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return np.asarray(out, dtype=a.dtype), bwd


@register("mean")
def _mean(a, *, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape),)

    return np.asarray(out, dtype=a.dtype), bwd


# ---------------------------------------------------------------------------
# shape ops


@register("broadcast")
def _broadcast(a, *, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return out, lambda g: (_unbroadcast(g, a.shape),)


@register("reshape")
def _reshape(a, *, shape):
    shape = tuple(shape)
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


@register("transpose")
def _transpose(a, *, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)
    return a.transpose(axes), lambda g: (g.transpose(inv),)


@register("concat")
def _concat(*arrays, axis=-1):
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            shapes = [x.shape for x in arrays]
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    out = np.concatenate(arrays, axis=ax)
    splits = np.cumsum([x.shape[ax] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=ax))


def _unshuffle_np(a, r):
    b, x, y, c = a.shape
    return a.reshape(b, x // r, r, y // r, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, x // r, y // r, r * r * c)


def _shuffle_np(a, r):
    b, x, y, c = a.shape
    co = c // (r * r)
    return a.reshape(b, x, y, r, r, co).transpose(0, 1, 3, 2, 4, 5).reshape(b, x * r, y * r, co)


@register("pixel_unshuffle")
def _pixel_unshuffle(a, *, factor):
    if a.ndim != 4 or a.shape[1] % factor or a.shape[2] % factor:
        raise ShapeError(f"pixel_unshuffle: shape {a.shape} not divisible by factor {factor}")
    return _unshuffle_np(a, factor), lambda g: (_shuffle_np(g, factor),)


@register("pixel_shuffle")
def _pixel_shuffle(a, *, factor):
    if a.ndim != 4 or a.shape[3] % (factor * factor):
        raise ShapeError(f"pixel_shuffle: channels of {a.shape} not divisible by {factor}^2")
    return _shuffle_np(a, factor), lambda g: (_unshuffle_np(g, factor),)


@register("linear_map")
def _linear_map(a, *, fn, fn_t, name="linear_map"):
    out = np.asarray(fn(a)).astype(a.dtype, copy=False)
    return out, lambda g: (np.asarray(fn_t(g)).astype(a.dtype, copy=False),)


# ---------------------------------------------------------------------------
# convolutions: input [B, X, Y, C]; dense weight [k, k, Cin, Cout]; depthwise weight [k, k, C]

_PADDINGS = ("same", "valid", "circular")


def _pad_amount(kind, k, padding):
    if padding not in _PADDINGS:
        raise ValueError(f"{kind}: unknown padding {padding!r}")
    if padding == "valid":
        return 0
    if k % 2 == 0:
        raise ShapeError(f"{kind}: '{padding}' padding needs an odd kernel, got {k}")
    return k // 2


def pad2d(a: np.ndarray, p: int, padding: str) -> np.ndarray:
    if p == 0:
        return a
    mode = "wrap" if padding == "circular" else "constant"
    return np.pad(a, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)


def _fold(g, axis, p, n):
    g = np.moveaxis(g, axis, 0)
    core = g[p : p + n].copy()
    core[n - p :] += g[:p]
    core[:p] += g[p + n :]
    return np.moveaxis(core, 0, axis)


def unpad2d(g: np.ndarray, p: int, padding: str, x: int, y: int) -> np.ndarray:
    if p == 0:
        return g
    if padding != "circular":
        return g[:, p : p + x, p : p + y]
    return _fold(_fold(g, 1, p, x), 2, p, y)


def _check_conv(kind, a, w, depthwise):
    if a.ndim != 4:
        raise ShapeError(f"{kind}: input must be [B, X, Y, C], got {a.shape}")
    want = 3 if depthwise else 4
    if w.ndim != want or w.shape[0] != w.shape[1] or w.shape[2] != a.shape[3]:
        raise ShapeError(f"{kind}: weight {w.shape} incompatible with input {a.shape}")


def conv2d_direct(a: np.ndarray, w: np.ndarray, padding: str = "same") -> np.ndarray:
    """Reference convolution by direct accumulation over kernel taps."""
    _check_conv("conv2d", a, w, False)
    k = w.shape[0]
    p = _pad_amount("conv2d", k, padding)
    ap = pad2d(a, p, padding)
    xo, yo = ap.shape[1] - k + 1, ap.shape[2] - k + 1
    out = np.zeros(a.shape[:1] + (xo, yo, w.shape[3]), dtype=np.result_type(a, w))
    for i in range(k):
        for j in range(k):
            out += ap[:, i : i + xo, j : j + yo, :] @ w[i, j]
    return out


def _im2col(ap, k):
    cols = sliding_window_view(ap, (k, k), axis=(1, 2))  # [B, Xo, Yo, C, k, k]
    b, xo, yo, c = cols.shape[:4]
    return cols.transpose(0, 1, 2, 4, 5, 3).reshape(b * xo * yo, k * k * c), (b, xo, yo)


def _conv_valid(ap, w):
    k, cin, cout = w.shape[0], w.shape[2], w.shape[3]
    cols, (b, xo, yo) = _im2col(ap, k)
    return (cols @ w.reshape(k * k * cin, cout)).reshape(b, xo, yo, cout), cols


@register("conv2d")
def _conv2d(a, w, *, padding="same"):
    _check_conv("conv2d", a, w, False)
    k, cout = w.shape[0], w.shape[3]
    p = _pad_amount("conv2d", k, padding)
    ap = pad2d(a, p, padding)
    if ap.shape[1] < k or ap.shape[2] < k:
        raise ShapeError(f"conv2d: input {a.shape} smaller than kernel {w.shape[:2]}")
    out, cols = _conv_valid(ap, w)

    def bwd(g):
        gw = (cols.T @ g.reshape(-1, cout)).reshape(w.shape)
        # gradient w.r.t. the padded input is a full correlation with the flipped kernel
        w_flip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        gap, _ = _conv_valid(pad2d(g, k - 1, "same"), w_flip)
        return unpad2d(gap, p, padding, a.shape[1], a.shape[2]), gw

    return out, bwd


@register("depthwise_conv2d")
def _depthwise_conv2d(a, w, *, padding="same"):
    _check_conv("depthwise_conv2d", a, w, True)
    k = w.shape[0]
    p = _pad_amount("depthwise_conv2d", k, padding)
    ap = pad2d(a, p, padding)
    xo, yo = ap.shape[1] - k + 1, ap.shape[2] - k + 1
    if xo < 1 or yo < 1:
        raise ShapeError(f"depthwise_conv2d: input {a.shape} smaller than kernel {w.shape[:2]}")
    out = np.zeros(a.shape[:1] + (xo, yo, a.shape[3]), dtype=a.dtype)
    for i in range(k):
        for j in range(k):
            out += ap[:, i : i + xo, j : j + yo, :] * w[i, j]

    def bwd(g):
        gap = np.zeros(ap.shape, dtype=g.dtype)
        gw = np.empty_like(w)
        for i in range(k):
            for j in range(k):
                gw[i, j] = (ap[:, i : i + xo, j : j + yo, :] * g).sum(axis=(0, 1, 2))
                gap[:, i : i + xo, j : j + yo, :] += g * w[i, j]
        return unpad2d(gap, p, padding, a.shape[1], a.shape[2]), gw

    return out, bwd


# ---------------------------------------------------------------------------
# functional front-ends


def add(a, b):
    return forward_op("add", a, b)


def sub(a, b):
    return forward_op("sub", a, b)


def mul(a, b):
    return forward_op("mul", a, b)


def scale(a, factor: float):
    return forward_op("scale", a, factor=float(factor))


def matmul(a, b):
    return forward_op("matmul", a, b)


def relu(a):
    return forward_op("relu", a)


def gelu(a):
    return forward_op("gelu", a)


def sigmoid(a):
    return forward_op("sigmoid", a)


def abs_(a):
    return forward_op("abs", a)


def clamp(a, lo: float = 0.0, hi: float = 1.0):
    return forward_op("clamp", a, lo=lo, hi=hi)


def layer_norm(a, eps: float = 1e-5):
    return forward_op("layer_norm", a, eps=eps)


def sum_(a, axis=None, keepdims=False):
    return forward_op("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return forward_op("mean", a, axis=axis, keepdims=keepdims)


def broadcast_to(a, shape):
    return forward_op("broadcast", a, shape=tuple(shape))


def reshape(a, shape):
    return forward_op("reshape", a, shape=tuple(shape))


def transpose(a, axes):
    return forward_op("transpose", a, axes=tuple(axes))


def concat(tensors, axis=-1):
    return forward_op("concat", *tensors, axis=axis)


def pixel_unshuffle(a, factor: int):
    return forward_op("pixel_unshuffle", a, factor=int(factor))


def pixel_shuffle(a, factor: int):
    return forward_op("pixel_shuffle", a, factor=int(factor))


def conv2d(a, w, padding: str = "same"):
    return forward_op("conv2d", a, w, padding=padding)


def depthwise_conv2d(a, w, padding: str = "same"):
    return forward_op("depthwise_conv2d", a, w, padding=padding)


def linear_map(a, fn, fn_t, name: str = "linear_map"):
    """Apply a linear operator ``fn`` whose transpose is ``fn_t``."""
    return forward_op("linear_map", a, fn=fn, fn_t=fn_t, name=name)
