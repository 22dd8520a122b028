"""Dense f64 tensors with a dynamically recorded reverse-mode tape.

Every differentiable operation builds its result through ``_make``, which
records the parent tensors and a backward closure. ``backward`` walks the
recorded graph once, in a fixed reverse-topological order, so gradient
accumulation is deterministic. Only matmul charges the FLOP ledger (see
flops.py); elementwise and normalization work is free.

Tensors are immutable after construction except for their gradient buffer.
All values must stay finite; a NaN or Inf anywhere is a contract violation
and raises immediately.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Iterable, Sequence

import numpy as np

from . import flops


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MaskError(ValueError):
    """An attention mask leaves some query with nothing to attend to."""


class GraphError(RuntimeError):
    """Backward called without (or after consuming) a recorded graph."""


_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "fusionrank_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / evaluation)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _as_array(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("tensor values must be finite (got NaN or Inf)")
    return arr


class Tensor:
    """An immutable f64 array plus optional gradient buffer and tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._done = False

    # -- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, *shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g, acc):
        acc(a, _unbroadcast(g * b.data, a.shape))
        acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def backward(g, acc):
        acc(a, _unbroadcast(g / b.data, a.shape))
        acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g, acc):
        acc(x, g * (x.data > 0.0))

    return _make(out, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(x.data > 0.0, x.data, slope * x.data)

    def backward(g, acc):
        acc(x, g * np.where(x.data > 0.0, 1.0, slope))

    return _make(out, (x,), backward)


def elu(x: Tensor) -> Tensor:
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0.0, x.data, neg)

    def backward(g, acc):
        acc(x, g * np.where(x.data > 0.0, 1.0, neg + 1.0))

    return _make(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g, acc):
        acc(x, g * (1.0 - out * out))

    return _make(out, (x,), backward)


# -- reductions and shape ops --------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, acc):
        if axis is None:
            acc(x, np.broadcast_to(g, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            acc(x, np.broadcast_to(gg, x.shape).copy())

    return _make(out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = x.data.reshape(shape)

    def backward(g, acc):
        acc(x, g.reshape(x.shape))

    return _make(out, (x,), backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = np.ascontiguousarray(x.data.swapaxes(a, b))

    def backward(g, acc):
        acc(x, g.swapaxes(a, b))

    return _make(out, (x,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, acc):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            acc(p, piece)

    return _make(out, tuple(parts), backward)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows along axis 0. Backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]

    def backward(g, acc):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        acc(x, gx)

    return _make(out, (x,), backward)


def select_position(x: Tensor, pos: int) -> Tensor:
    """Pick one position along the second-to-last axis: [..., T, H] -> [..., H]."""
    out = np.ascontiguousarray(x.data[..., pos, :])

    def backward(g, acc):
        gx = np.zeros_like(x.data)
        gx[..., pos, :] = g
        acc(x, gx)

    return _make(out, (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of ``table`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    out = table.data[ids]

    def backward(g, acc):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        acc(table, gt)

    return _make(out, (table,), backward)


# -- matmul (the only FLOP-charged op) ------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = a.data @ b.data
    # 2*m*n*k per product, times whatever batch dims broadcast produced.
    flops.record(2 * out.size * a.shape[-1])

    def backward(g, acc):
        acc(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        acc(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(out, (a, b), backward)


# -- fused normalization / attention / loss ops ---------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Stable softmax along the last axis; each row sums to 1."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g, acc):
        dot = (g * out).sum(axis=-1, keepdims=True)
        acc(x, out * (g - dot))

    return _make(out, (x,), backward)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax along the last axis with boolean ``mask`` (True = attend).

    Masked positions get exactly zero weight. Raises ``MaskError`` if any
    row of the broadcast mask is entirely False.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise MaskError("attention mask leaves a query with no valid key")
    neg = np.where(mask, scores.data, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g, acc):
        dot = (g * out).sum(axis=-1, keepdims=True)
        acc(scores, out * (g - dot))  # out is 0 at masked slots, so grads are too

    return _make(out, (scores,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply gain+bias."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({h},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g, acc):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        acc(x, inv_std * (dxhat - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        acc(gain, (g * xhat).sum(axis=red))
        acc(bias, g.sum(axis=red))

    return _make(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, target_dist: Tensor) -> Tensor:
    """-sum(target * log softmax(logits)) for a single distribution."""
    if logits.ndim != 1 or target_dist.shape != logits.shape:
        raise ShapeError("cross_entropy expects matching 1-D logits and target")
    t = target_dist.data
    if (t < -1e-12).any() or abs(t.sum() - 1.0) > 1e-9:
        raise ValueError("target distribution must be nonnegative and sum to 1")
    shifted = logits.data - logits.data.max()
    logz = math.log(np.exp(shifted).sum())
    logp = shifted - logz
    out = -(t * logp).sum()

    def backward(g, acc):
        acc(logits, g * (np.exp(logp) - t))
        acc(target_dist, g * (-logp))

    return _make(np.asarray(out), (logits, target_dist), backward)


def token_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean per-token cross entropy: logits [T, V], integer targets [T].

    ``weights`` (float [T], default all-ones) masks out padding positions;
    the result is the weighted sum divided by the total weight.
    """
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("token_cross_entropy expects [T,V] logits and [T] targets")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("token_cross_entropy needs positive total weight")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = logp[np.arange(len(targets)), targets]
    out = -(w * picked).sum() / wsum

    def backward(g, acc):
        p = np.exp(logp)
        p[np.arange(len(targets)), targets] -= 1.0
        acc(logits, g * p * (w / wsum)[:, None])

    return _make(np.asarray(out), (logits,), backward)


# -- backward driver -------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    The loss must be a scalar produced by recorded computation. Gradients
    accumulate in one deterministic reverse-topological pass; a second call
    on the same node raises (re-run the forward pass instead).
    """
    if loss.size != 1:
        raise GraphError("backward requires a scalar loss")
    if loss._backward_fn is None:
        raise GraphError("backward called without a recorded graph")
    if loss._done:
        raise GraphError("backward already ran for this node; re-run forward first")
    loss._done = True

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def acc(node: Tensor, g: np.ndarray):
        if not node.requires_grad:
            return
        key = id(node)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = np.array(g, dtype=np.float64, copy=True)

    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward_fn is None:
            continue
        node._backward_fn(g, acc)

    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise ValueError("non-finite gradient encountered during backward")
        node.grad = g if node.grad is None else node.grad + g
