"""Small reverse-mode autodiff engine on top of numpy.

Every value is a float64 ``Tensor`` laid out channels-first ``(N, C, *spatial)``.
Operations record a closure that maps the output gradient to the gradients
of their parents; :meth:`Tensor.backward` walks the graph in reverse
topological order and accumulates into leaves that require gradients.

Convolutions are implemented with im2col / col2im over ``sliding_window_view``
and work for any number of spatial axes (the models use 2 and 3).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_EXP_MAX = 700.0
_LOG_MIN = 1e-300

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        other = _as_tensor(other)
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), reciprocal(self))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    # -- reductions / shape ----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- unary -------------------------------------------------------------
    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return power(self, 0.5)

    def abs(self) -> Tensor:
        return tabs(self)

    def relu(self) -> Tensor:
        return relu(self)

    def silu(self) -> Tensor:
        return silu(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def leaky_relu(self, alpha: float = 0.2) -> Tensor:
        return leaky_relu(self, alpha)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires gradients."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._prev, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,))


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    out = x**exponent
    return _result(out, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(np.minimum(a.data, _EXP_MAX))
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = np.maximum(a.data, _LOG_MIN)
    return _result(np.log(x), (a,), lambda g: (g / x,))


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(a.data > 0, 1.0, alpha)
    return _result(a.data * slope, (a,), lambda g: (g * slope,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_np(x)
    return _result(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _result(np.where(mask, a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def moveaxis(a: Tensor, source: int, destination: int) -> Tensor:
    axes = list(range(a.ndim))
    axes.insert(destination % a.ndim, axes.pop(source % a.ndim))
    return transpose(a, axes)


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _result(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def resample_axis(a: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a fixed linear map ``matrix`` (out x in) along one axis."""
    axis = axis % a.ndim
    m = np.asarray(matrix, dtype=DTYPE)
    if m.shape[1] != a.shape[axis]:
        raise ShapeError(f"axis {axis} has extent {a.shape[axis]}, matrix expects {m.shape[1]}")
    out = np.moveaxis(np.tensordot(m, a.data, axes=([1], [axis])), 0, axis)

    def backward(g):
        return (np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis),)

    return _result(out, (a,), backward)


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Repeat every spatial element ``factor`` times along each spatial axis."""
    nsp = a.ndim - 2
    out = a.data
    for ax in range(2, a.ndim):
        out = np.repeat(out, factor, axis=ax)

    def backward(g):
        shape = list(a.shape[:2])
        for n in a.shape[2:]:
            shape += [n, factor]
        g = g.reshape(shape)
        return (g.sum(axis=tuple(3 + 2 * i for i in range(nsp))),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# losses used everywhere
# ---------------------------------------------------------------------------

def mse(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = 2.0 * g * diff / n
        return d, -d

    return _result(np.mean(diff * diff), (a, b), backward)


def l1(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1 shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    s = np.sign(diff) / diff.size

    def backward(g):
        return g * s, -g * s

    return _result(np.mean(np.abs(diff)), (a, b), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy computed stably from logits."""
    x = logits.data
    y = np.asarray(targets, dtype=DTYPE).reshape(x.shape)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(x.shape)
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        return (g * w * (_sigmoid_np(x) - y) / n,)

    return _result(np.mean(w * loss), (logits,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return neg(tmean(tsum(lsm * Tensor(onehot), axis=-1)))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    widths = [(0, 0), (0, 0)] + [(padding, padding)] * (x.ndim - 2)
    return np.pad(x, widths)


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kshape: tuple[int, ...], stride: int, padding: int):
    nsp = len(kshape)
    xp = _pad_spatial(x, padding)
    spatial_axes = tuple(range(2, 2 + nsp))
    win = sliding_window_view(xp, kshape, axis=spatial_axes)
    if stride != 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nsp]
    out_sp = win.shape[2:2 + nsp]
    n, c = x.shape[:2]
    # (N, *out, C, *k)
    perm = (0,) + tuple(range(2, 2 + nsp)) + (1,) + tuple(range(2 + nsp, 2 + 2 * nsp))
    cols = win.transpose(perm).reshape(n * math.prod(out_sp), c * math.prod(kshape))
    return cols, out_sp


def _scatter_kernel(g2: np.ndarray, w: np.ndarray, xshape: tuple[int, ...],
                    out_sp: tuple[int, ...], stride: int, padding: int) -> np.ndarray:
    """col2im of ``g2 @ w.reshape(O, -1)`` without materialising the columns.

    ``g2`` is ``(N*prod(out), O)``, ``w`` is ``(O, C, *k)``; the result has
    shape ``xshape = (N, C, *spatial)``.
    """
    kshape = w.shape[2:]
    nsp = len(kshape)
    n, c = xshape[:2]
    padded = tuple(s + 2 * padding for s in xshape[2:])
    xp = np.zeros((n,) + padded + (c,), dtype=DTYPE)
    block = (n,) + tuple(out_sp) + (c,)
    wk = np.ascontiguousarray(np.moveaxis(w.reshape(w.shape[:2] + (-1,)), -1, 0))
    for i, offs in enumerate(np.ndindex(*kshape)):
        sl = tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(offs, out_sp))
        xp[(slice(None),) + sl] += (g2 @ wk[i]).reshape(block)
    if padding:
        xp = xp[(slice(None),) + (slice(padding, -padding),) * nsp]
    return np.ascontiguousarray(np.moveaxis(xp, -1, 1))


def _check_conv(x: np.ndarray, w: np.ndarray, ndim: int | None, channel_axis: int) -> int:
    nsp = w.ndim - 2
    if ndim is not None and nsp != ndim:
        raise ShapeError(f"kernel has {nsp} spatial axes but ndim={ndim}")
    if x.ndim != nsp + 2:
        raise ShapeError(f"input has {x.ndim - 2} spatial axes, kernel has {nsp}")
    if x.shape[1] != w.shape[channel_axis]:
        raise ShapeError(
            f"axis 1 (channels): input has {x.shape[1]}, kernel expects {w.shape[channel_axis]}")
    return nsp


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
         padding: int = 0, ndim: int | None = None) -> Tensor:
    """N-d cross-correlation with zero padding.

    ``x`` is ``(N, C_in, *spatial)``, ``kernel`` is ``(C_out, C_in, *k)``.
    Output extent per axis is ``floor((in + 2*padding - k) / stride) + 1``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    nsp = _check_conv(x.data, kernel.data, ndim, 1)
    kshape = kernel.shape[2:]
    for ax in range(nsp):
        if kshape[ax] > x.shape[2 + ax] + 2 * padding:
            raise ShapeError(
                f"axis {2 + ax}: kernel extent {kshape[ax]} exceeds padded input "
                f"{x.shape[2 + ax] + 2 * padding}")
    cols, out_sp = _im2col(x.data, kshape, stride, padding)
    c_out = kernel.shape[0]
    w2 = kernel.data.reshape(c_out, -1)
    out2 = cols @ w2.T
    if bias is not None:
        out2 = out2 + bias.data
    n = x.shape[0]
    out = np.moveaxis(out2.reshape((n,) + tuple(out_sp) + (c_out,)), -1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = np.moveaxis(g, 1, -1).reshape(-1, c_out)
        gx = _scatter_kernel(g2, kernel.data, x.shape, out_sp, stride, padding) if x.requires_grad else None
        gw = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(np.ascontiguousarray(out), parents, backward)


def conv_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                   padding: int = 0, output_padding: int = 0, ndim: int | None = None) -> Tensor:
    """Adjoint of :func:`conv` with the same kernel.

    ``kernel`` is ``(C_a, C_b, *k)`` exactly as passed to ``conv``; this maps
    ``C_a`` channels back to ``C_b``. Output extent per axis is
    ``(in - 1)*stride - 2*padding + k + output_padding``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    nsp = _check_conv(x.data, kernel.data, ndim, 0)
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError("output_padding must be smaller than stride")
    kshape = kernel.shape[2:]
    c_a, c_b = kernel.shape[:2]
    in_sp = x.shape[2:]
    out_ext = tuple((m - 1) * stride - 2 * padding + k + output_padding
                    for m, k in zip(in_sp, kshape))
    for ax, e in enumerate(out_ext):
        if e < 1:
            raise ShapeError(f"axis {2 + ax}: transposed output extent {e} < 1")
    n = x.shape[0]
    x2 = np.moveaxis(x.data, 1, -1).reshape(-1, c_a)
    w2 = kernel.data.reshape(c_a, -1)
    out_shape = (n, c_b) + out_ext
    out = _scatter_kernel(x2, kernel.data, out_shape, in_sp, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape((1, c_b) + (1,) * nsp)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        cols, _ = _im2col(g, kshape, stride, padding)
        gx = None
        if x.requires_grad:
            gx = np.moveaxis((cols @ w2.T).reshape((n,) + tuple(in_sp) + (c_a,)), -1, 1)
        gw = (x2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + nsp)))

    return _result(out, parents, backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    x = _as_tensor(x)
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xs = x.data.reshape(n, groups, -1)
    mu = xs.mean(axis=2, keepdims=True)
    var = xs.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xs - mu) * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    parents = tuple(p for p in (x, gamma, beta) if p is not None)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        dxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        grads = []
        if x.requires_grad:
            dh = dxhat.reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            dx = inv * (dh - dh.mean(axis=2, keepdims=True)
                        - xh * (dh * xh).mean(axis=2, keepdims=True))
            grads.append(dx.reshape(x.shape))
        else:
            grads.append(None)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
               state: AdamWState) -> None:
    """One in-place AdamW update; decay is applied to the weights first."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"optimizer tracks {len(state.m)} tensors, got {len(params)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Optimizer over a fixed, ordered list of parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total
