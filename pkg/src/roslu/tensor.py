"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable quantity in the model is a :class:`Tensor`.  Kernels are
plain functions that compute a numpy forward value and register a closure that
maps the upstream gradient to one gradient per parent.  ``backward`` walks the
graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, GradientError, ShapeError

_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECK_FINITE = os.environ.get("ROSLU_CHECK_FINITE", "0") not in ("", "0")

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def set_default_dtype(dtype) -> None:
    """Switch the float width used for new tensors (float64 is the default)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


def set_checked(flag: bool) -> None:
    """Turn NaN/Inf detection on every forward output on or off."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf"):
        self.values = np.asarray(values, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True, op="param")


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(values)):
        raise GradientError(f"{op}: non-finite value in forward output")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    out._consumed = False
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(kernel: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kernel, a.shape, b.shape) from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.values, b.values)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    av, bv = a.values, b.values

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(av, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, av.shape),
                None if gb is None else _unbroadcast(gb, bv.shape))

    return _make(out, (a, b), bw, "matmul")


# ------------------------------------------------------------ shape handling

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing (slices, integer arrays)."""
    src_shape = a.shape
    try:
        out = a.values[index]
    except IndexError as exc:
        raise ShapeError("slice", src_shape, detail=str(exc)) from None

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=a.values.dtype), (a,), bw, "slice")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape, detail="id out of range")
    n = table.shape[0]

    def bw(g):
        flat = g.reshape(-1, g.shape[-1])
        # bincount-style accumulation in a fixed (sequential) order
        full = np.zeros((n, g.shape[-1]), dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), flat)
        return (full,)

    return _make(table.values[ids], (table,), bw, "embedding")


# -------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.values.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -------------------------------------------------------------- nonlinear

def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(a.values * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.values)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = a.values
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def softmax(a: Tensor) -> Tensor:
    x = a.values
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.values
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values

    def bw(g):
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(xhat * gv + bias.values, (a, gain, bias), bw, "layer_norm")


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; masked entries receive no gradient."""
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None
    keep = ~full
    return _make(np.where(full, value, a.values), (a,), lambda g: (g * keep,), "masked_fill")


def dropout(a: Tensor, rate: float, rng, train: bool = True) -> Tensor:
    """Inverted dropout; ``rng`` is a :class:`roslu.rng.Rng` substream."""
    if not train or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.values * keep, (a,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, targets, mask=None, reduction: str = "sum") -> Tensor:
    """Cross-entropy from unnormalised logits over the last axis.

    ``targets`` has the leading shape of ``logits``; ``mask`` (same shape as
    ``targets``) zeroes the loss at padded positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    x = logits.values
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    losses = lse - picked
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=_DTYPE)
    losses = losses * w
    if reduction == "none":
        out = losses
    elif reduction == "sum":
        out = np.asarray(losses.sum())
    elif reduction == "mean":
        out = np.asarray(losses.sum() / max(w.sum(), 1.0))
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")

    def bw(g):
        p = np.exp(shifted - lse[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        if reduction == "mean":
            g = g / max(w.sum(), 1.0)
        coef = (g * w) if reduction == "none" else (w * g)
        return ((p - onehot) * coef[..., None],)

    return _make(out, (logits,), bw, "cross_entropy")


def grad_reverse(a: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; the backward pass hands ``-lam * upstream`` to ``a``."""
    lam = float(lam)
    if lam < 0 or math.isnan(lam):
        raise ConfigError(f"grad_reverse lambda must be >= 0, got {lam}")
    return _make(a.values, (a,), lambda g: (-lam * g,), "grad_reverse")


# ---------------------------------------------------------------- backward

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable requires_grad node.

    Gradients must be cleared with :func:`zero_grad` between calls; running
    backward into a parameter that still holds a gradient raises.
    """
    if loss.values.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if loss._consumed:
        raise GradientError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any parameter")
    order = _topo_order(loss)
    for node in order:
        if node._backward is None and node.grad is not None:
            raise GradientError("parameter already holds a gradient; call zero_grad first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.values)
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    loss._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0,
             velocity: dict | None = None) -> None:
    """w <- w - lr * g for every parameter holding a gradient.

    Parameters without a gradient (unreachable from the loss) are left as is.
    The whole step is aborted, with no parameter touched, if any gradient is
    non-finite.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.values.shape:
            raise ShapeError("sgd_step", p.values.shape, p.grad.shape)
        if not np.all(np.isfinite(p.grad)):
            raise GradientError(f"non-finite gradient in parameter of shape {p.shape}; step aborted")
    for p in params:
        if p.grad is None:
            continue
        if momentum:
            v = velocity.setdefault(id(p), np.zeros_like(p.values))
            v *= momentum
            v += p.grad
            p.values -= lr * v
        else:
            p.values -= lr * p.grad
