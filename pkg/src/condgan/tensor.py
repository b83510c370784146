"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds a node holding its parents and a closure that maps the
upstream gradient to one gradient per parent. ``backward`` walks the nodes
reachable from a scalar loss in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericError",
    "ShapeError",
    "DeterminismError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "matmul",
    "conv2d",
    "deconv2d",
    "hadamard",
    "concat",
    "dropout",
    "topological_order",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an op."""


class DeterminismError(RuntimeError):
    """Two evaluations of the same function disagreed."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
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
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self, slope: float = 0.2):
        return leaky_relu(self, slope)

    def clip(self, lo: float, hi: float):
        return clip(self, lo, hi)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_finite(arr: np.ndarray, op: str, where: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"op '{op}' produced non-finite values during {where}")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents that were constants when the op ran stay constants, even if a
        # frozen() block later re-enables their gradient
        out._parents = tuple(p if p.requires_grad else _CONSTANT for p in parents)
        out._backward = backward_fn
    return out


_CONSTANT = Tensor(np.zeros(()))


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


# -- element-wise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def back(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _node(out, (a, b), back, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad ** exponent
    return _node(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product of two tensors of identical shape (no broadcasting)."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs identical shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _node(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _node(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; ``rate`` 1.0 zeroes everything."""
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        keep = np.zeros(a.shape, dtype=a.dtype)
    else:
        keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _node(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), back, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return reduce_sum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.asarray(a.data[index]), (a,), back, "index")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis`` in argument order."""
    if not parts:
        raise ShapeError("concat needs at least one part")
    ndim = parts[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat axis {axis} out of range for rank {ndim}")
    axis %= ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(
                f"concat shapes incompatible along non-concat axes: "
                f"{[q.shape for q in parts]} (axis {axis})"
            )
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back, "concat")


# -- linear algebra and convolution ------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _windows(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    # (N, C, out_h, out_w, k, k) strided view, no copy
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    k = w.shape[2]
    oh = _conv_out(x.shape[2], k, stride, pad)
    ow = _conv_out(x.shape[3], k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _windows(xp, k, stride, oh, ow)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_grad_input(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    """Scatter-add adjoint of ``_conv_forward`` w.r.t. its input."""
    n, _, oh, ow = g.shape
    c, k = w.shape[1], w.shape[2]
    h, wd = in_hw
    hp, wp = max(h + 2 * pad, (oh - 1) * stride + k), max(wd + 2 * pad, (ow - 1) * stride + k)
    dcols = np.tensordot(g, w, axes=([1], [0]))  # (N, oh, ow, C, k, k)
    dxp = np.zeros((n, c, hp, wp), dtype=np.result_type(g, w))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, pad : pad + h, pad : pad + wd]


def _conv_grad_weight(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    oh, ow = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _windows(xp, k, stride, oh, ow)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with kernels ``w`` (F,C,k,k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    k = w.shape[2]
    h, wd = x.shape[2], x.shape[3]
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {x.shape[2:]} (pad {pad})")
    xd, wdat = x.data, w.data

    def back(g):
        return (_conv_grad_input(g, wdat, stride, pad, (h, wd)),
                _conv_grad_weight(xd, g, k, stride, pad))

    return _node(_conv_forward(xd, wdat, stride, pad), (x, w), back, "conv2d")


def deconv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution of ``x`` (N,C,H,W) with ``w`` (C,F,k,k).

    Defined as the input-gradient map of ``conv2d`` with the same geometry,
    so output extent is ``(H-1)*stride - 2*pad + k``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"deconv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"deconv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    k = w.shape[2]
    oh = (x.shape[2] - 1) * stride - 2 * pad + k
    ow = (x.shape[3] - 1) * stride - 2 * pad + k
    if oh < 1 or ow < 1:
        raise ShapeError(f"deconv2d geometry gives empty output {oh}x{ow} for input {x.shape}")
    xd, wdat = x.data, w.data

    def back(g):
        return (_conv_forward(g, wdat, stride, pad),
                _conv_grad_weight(g, xd, k, stride, pad))

    out = _conv_grad_input(xd, wdat, stride, pad, (oh, ow))
    return _node(np.ascontiguousarray(out), (x, w), back, "deconv2d")


# -- graph traversal -----------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Back-propagate a scalar ``loss``.

    With ``params`` given, their gradients are returned in order and a
    parameter the loss does not depend on gets zeros. Without it, every
    reachable leaf has its ``.grad`` accumulated instead.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(topological_order(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                if params is None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                _check_finite(pg, node.op, "backward")
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


# -- finite-difference checking -------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps exactly-zero gradients from dividing round-off by zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    again = f(Tensor(base.copy()))
    if out.data.tobytes() != again.data.tobytes():
        raise DeterminismError("f returned different values for identical inputs")
    (analytic,) = backward(out, [xt])

    numeric = np.zeros_like(base)
    probe = base.copy()
    flat, nflat = probe.reshape(-1), numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(probe)).item()
            flat[i] = orig - h
            fm = f(Tensor(probe)).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckReport(analytic, numeric, np.abs(analytic - numeric) / denom, tol)
