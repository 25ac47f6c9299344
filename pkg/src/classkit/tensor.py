"""Dense float64 tensor with reverse-mode differentiation.

Every operation computes its forward value eagerly with numpy and records a
closure mapping the output gradient to gradients for each parent.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.  Layout for image features is (batch, channels, rows,
cols), row-major.
"""

from __future__ import annotations

import contextlib
import contextvars
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError, DimensionError, EmptyRegionError

DTYPE = np.float64
STD_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = contextvars.ContextVar("classkit_grad_enabled", default=True)
_kink_log = contextvars.ContextVar("classkit_kink_log", default=None)


@contextlib.contextmanager
def record_kinks():
    """Collect the on/off pattern of every piecewise-linear op run inside the block.

    Yields a list that receives one packed mask per op call; finite-difference
    checks compare these to detect a stencil that straddles a kink.
    """
    log_: list[bytes] = []
    token = _kink_log.set(log_)
    try:
        yield log_
    finally:
        _kink_log.reset(token)


def _note_kinks(mask: np.ndarray) -> None:
    log_ = _kink_log.get()
    if log_ is not None:
        log_.append(np.packbits(mask).tobytes())


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (context-local)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = ""
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None or self._backward is not None else self.grad + seed
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    # leaves own their buffer so callers may update it in place
                    g = np.array(g, dtype=DTYPE, copy=True)
                    parent.grad = g if parent.grad is None else parent.grad + g
                else:
                    parent.grad = g if parent.grad is None else parent.grad + g

    # -- operator sugar ----------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)

    def backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return _node(x.data**p, (x,), backward, "pow")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _note_kinks(x.data >= 0)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _note_kinks(inside)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _note_kinks(mask)
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")  # NaN propagates


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _node(np.asarray(out, dtype=DTYPE), (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise EmptyRegionError("mean over an empty region")
    return reduce_sum(x, axis, keepdims) * (1.0 / count)


def std(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation, ``sqrt(var + 1e-12)``."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0 or x.size == 0:
        raise EmptyRegionError("std over an empty region")
    mu = x.data.mean(axis=axes, keepdims=True)
    centred = x.data - mu
    sd = np.sqrt((centred**2).mean(axis=axes, keepdims=True) + STD_EPS)
    out = sd if keepdims else np.squeeze(sd, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * centred / (count * sd),)

    return _node(np.asarray(out, dtype=DTYPE), (x,), backward, "std")


def window_reduce(x: Tensor, kind: str, window: int, stride: int) -> Tensor:
    """Reduce every ``window``x``window`` patch of the last two axes.

    Patches start at multiples of ``stride``; the result has shape
    ``(..., (H - window)//stride + 1, (W - window)//stride + 1)``.
    ``kind`` is one of ``sum``, ``mean`` or ``std`` (population, stabilised).
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"window_reduce needs at least 2 axes, got shape {x.shape}")
    h, w = x.shape[-2:]
    k, s = int(window), int(stride)
    if k < 1 or s < 1 or k > h or k > w:
        raise EmptyRegionError(f"window {k} with stride {s} does not fit a {h}x{w} map")
    mh, mw = (h - k) // s + 1, (w - k) // s + 1
    view = sliding_window_view(x.data, (k, k), axis=(-2, -1))[..., ::s, ::s, :, :]
    n = k * k
    sums = view.sum(axis=(-2, -1))
    mean = sums / n
    if kind == "sum":
        out = sums
    elif kind == "mean":
        out = mean
    elif kind == "std":
        var = ((view - mean[..., None, None]) ** 2).sum(axis=(-2, -1)) / n
        out = np.sqrt(var + STD_EPS)
    else:
        raise ContractError(f"unknown reduction {kind!r}")

    def backward(g):
        dx = np.zeros(x.shape, dtype=DTYPE)
        if kind == "sum":
            coeff = g
        elif kind == "mean":
            coeff = g / n
        else:
            coeff = g / (n * out)
        for i in range(k):
            rows = slice(i, i + s * (mh - 1) + 1, s)
            for j in range(k):
                cols = slice(j, j + s * (mw - 1) + 1, s)
                if kind == "std":
                    dx[..., rows, cols] += coeff * (x.data[..., rows, cols] - mean)
                else:
                    dx[..., rows, cols] += coeff
        return (dx,)

    return _node(out, (x,), backward, f"window_{kind}")


def reduction(x: Tensor, kind: str, region: str = "all", window: int | None = None,
              stride: int | None = None) -> Tensor:
    """Dispatch helper: ``region='all'`` reduces everything, ``'window'`` patches."""
    if region == "all":
        if x.size == 0:
            raise EmptyRegionError("reduction over an empty tensor")
        if kind == "sum":
            return reduce_sum(x)
        if kind == "mean":
            return reduce_mean(x)
        if kind == "std":
            return std(x)
        raise ContractError(f"unknown reduction {kind!r}")
    if region == "window":
        if window is None:
            raise ContractError("window reduction needs a window size")
        return window_reduce(x, kind, window, stride or window)
    raise ContractError(f"unknown region {region!r}")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"cannot concatenate {t.shape} with {ref} along axis {ax}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _node(out, tensors, backward, "concat")


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def shape_op(x, kind: str, **kwargs) -> Tensor:
    if kind == "reshape":
        return reshape(x, kwargs["shape"])
    if kind == "transpose":
        return transpose(x, kwargs.get("axes"))
    if kind == "concat_channels":
        return concat_channels([x, *kwargs["others"]])
    raise ContractError(f"unknown shape op {kind!r}")


def permute_along(x: Tensor, order: np.ndarray, axis: int) -> Tensor:
    """Reorder entries of ``x`` along ``axis`` by ``order`` (a permutation per slice).

    ``order`` follows :func:`numpy.take_along_axis` broadcasting rules.
    """
    x = as_tensor(x)
    order = np.asarray(order)
    inverse = np.argsort(order, axis=axis, kind="stable")
    out = np.take_along_axis(x.data, order, axis=axis)

    def backward(g):
        return (np.take_along_axis(g, inverse, axis=axis),)

    return _node(out, (x,), backward, "permute")


def flip(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return _node(np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis),), "flip")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# convolution / resampling / normalisation
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with an (out, in, k, k) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if kh != kw:
        raise DimensionError(f"conv2d needs a square kernel, got {w.shape}")
    k, s, p = kh, int(stride), int(padding)
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d kernel {k} does not fit input {x.shape} with padding {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data

    if k == 1:
        cols = xp[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        out = np.tensordot(w.data[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if k == 1:
            if w.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            if x.requires_grad:
                gcols = np.tensordot(w.data[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
                gxp = np.zeros(xp.shape, dtype=DTYPE)
                gxp[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s] = gcols
                gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        else:
            if w.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                # (n, ho, wo, cin, k, k)
                gcols = np.tensordot(g, w.data, axes=([1], [0]))
                gxp = np.zeros(xp.shape, dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                            gcols[..., i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, as_tensor(bias))
    return _node(out, parents, backward, "conv2d")


@lru_cache(maxsize=256)
def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights, half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0 if i0 < n_in - 1 else 0.0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes bilinearly; identity (bit-exact) when sizes match."""
    x = as_tensor(x)
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ContractError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _node(x.data.copy(), (x,), lambda g: (g,), "resize")
    mh = interpolation_matrix(h, out_h)
    mw = interpolation_matrix(w, out_w)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _node(out, (x,), backward, "resize")


def batch_norm(x: Tensor, gamma: Tensor, shift: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over (batch, rows, cols).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance for the running estimate).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm parameters {gamma.shape}/{shift.shape} do not match {c} channels")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        if n < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs >= 2 values per channel, got {n}")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * n / (n - 1)
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = g4 * xhat + shift.data.reshape(1, c, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gshift = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            if training:
                gx = inv_std / n * (
                    n * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv_std
        return gx, ggamma, gshift

    return _node(out, (x, gamma, shift), backward, "batch_norm")
