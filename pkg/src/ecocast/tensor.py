"""Dense float64 tensors with tape-style reverse-mode automatic differentiation.

Every op records its inputs and a backward rule on the output tensor; node
creation order doubles as the topological order, so the backward pass walks
nodes exactly once in reverse creation order. Only the operations the model
needs are provided (no broadcasting beyond trailing-shape bias adds, no GPU).
"""

from __future__ import annotations

import heapq
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# Most negative finite float64 stands in for -inf; softmax excludes entries
# at or below SENTINEL / 2 so masked logits stay finite end to end.
SENTINEL = float(np.finfo(np.float64).min)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_order_counter = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suspends graph recording (e.g. teacher passes)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._order = next(_order_counter)

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    ones = tuple(ax for ax, n in enumerate(shape) if n == 1 and grad.shape[ax] != 1)
    if ones:
        grad = grad.sum(axis=ones, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        data = a.data * c

        def backward_scalar(g):
            return (g * c,)

        return _make(data, (a,), backward_scalar)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ValueError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _make(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def backward(g):
        return (g * mask,)

    return _make(data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * x2 * xd))
    data = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * local,)

    return _make(data, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), evaluated as x + ln(1 + e^-x) for large x (overflow-safe)."""
    x = _as_tensor(x)
    data = np.logaddexp(0.0, x.data)
    xd = x.data

    def backward(g):
        sig = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.clip(xd, 0, None))),
                       np.exp(np.clip(xd, None, 0)) / (1.0 + np.exp(np.clip(xd, None, 0))))
        return (g * sig,)

    return _make(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / data,)

    return _make(data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`; entries <= SENTINEL/2 are excluded and map to 0."""
    x = _as_tensor(x)
    xd = x.data
    keep = xd > SENTINEL / 2
    if keep.all():
        e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    else:
        if not keep.any(axis=axis).all():
            raise ValueError("softmax: a slice has every entry at the -inf sentinel")
        shifted = np.where(keep, xd, -np.inf)
        shifted = shifted - shifted.max(axis=axis, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, shifted, 0.0)), 0.0)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        s = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - s),)

    return _make(data, (x,), backward)


def topk_mask(x: Tensor, k: int, axis: int = -1) -> Tensor:
    """Keep the k largest entries along `axis`, set the rest to SENTINEL.

    Ties at the k-th value break toward the lower index. Gradient passes only
    through the kept entries.
    """
    x = _as_tensor(x)
    n = x.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"topk_mask: k={k} outside [1, {n}]")
    order = np.argsort(-x.data, axis=axis, kind="stable")
    kept = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(kept, np.take(order, range(k), axis=axis), True, axis=axis)
    data = np.where(kept, x.data, SENTINEL)

    def backward(g):
        return (g * kept,)

    return _make(data, (x,), backward)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    data = np.asarray(x.data.sum(axis=axis))
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(data, (x,), backward)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance) then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gain.data * xhat + bias.data
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gbias = g.sum(axis=lead) if lead else g.copy()
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# shape / indexing ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(data, (x,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat: need at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(data, tuple(parts), backward)


def take_rows(x: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows x[ids]; gradient scatter-adds back into x."""
    x = _as_tensor(x)
    idx = np.asarray(list(ids), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take_rows: index out of range for {x.shape[0]} rows")
    data = x.data[idx]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(data, (x,), backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    return take_rows(table, ids)


def scatter_rows(x: Tensor, ids: Sequence[int], rows: Tensor) -> Tensor:
    """Return a copy of x with x[ids] replaced by `rows` (ids must be distinct)."""
    x, rows = _as_tensor(x), _as_tensor(rows)
    idx = np.asarray(list(ids), dtype=np.intp)
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("scatter_rows: duplicate indices")
    data = x.data.copy()
    data[idx] = rows.data

    def backward(g):
        gx = g.copy()
        gx[idx] = 0.0
        return gx, g[idx].copy()

    return _make(data, (x, rows), backward)


def index_add_rows(x: Tensor, ids: Sequence[int], rows: Tensor) -> Tensor:
    """Return x with `rows` added at the given row indices (ids distinct)."""
    x, rows = _as_tensor(x), _as_tensor(rows)
    idx = np.asarray(list(ids), dtype=np.intp)
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("index_add_rows: duplicate indices")
    data = x.data.copy()
    data[idx] += rows.data

    def backward(g):
        return g.copy(), g[idx].copy()

    return _make(data, (x, rows), backward)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Propagate dL/d(leaf) into `.grad` of every requires_grad leaf.

    Nodes are visited exactly once, in reverse creation order (creation order
    is a topological order because inputs always precede outputs).
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    heap: list[tuple[int, int]] = [(-loss._order, id(loss))]
    nodes: dict[int, Tensor] = {id(loss): loss}
    queued = {id(loss)}
    while heap:
        _, nid = heapq.heappop(heap)
        node = nodes.pop(nid)
        queued.discard(nid)
        g = grads.pop(nid)
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._backward):
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
            if pid not in queued:
                queued.add(pid)
                nodes[pid] = parent
                heapq.heappush(heap, (-parent._order, pid))
