"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record themselves (operands + a backward closure) so that
:func:`backward` can walk the resulting graph in reverse topological order.

Only the primitives needed by the desk-scale transformer live here; layers
are composed from them in :mod:`deskvla.nn`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    """Select float64 (default, required for gradient checks) or float32."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


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
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic info -----------------------------------------------------
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
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self, retain_graph: bool = False):
        return backward(self, retain_graph=retain_graph)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._consumed = False
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
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


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), grad_fn, "add")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad * bd, (a, b), grad_fn, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)

    def grad_fn(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _record(x * s, (a,), grad_fn, "silu")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {a.shape}") from None
    out = np.where(mask, value, a.data).astype(a.data.dtype, copy=False)

    def grad_fn(g):
        return (_unbroadcast(np.where(mask, 0.0, g), a.shape),)

    return _record(out, (a,), grad_fn, "masked_fill")


# -- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    src = a.shape
    return _record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        parts = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _record(out, tensors, grad_fn, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    """Slicing and integer-array gathering (gradient scatters back with add)."""
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def grad_fn(g):
        z = np.zeros_like(a.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _record(np.array(out, copy=True) if basic else out, (a,), grad_fn, "slice")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


# -- reductions ------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- linear algebra ----------------------------------------------------------

def _ordered_matmul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Matrix product that accumulates the contraction index strictly in order.

    Each output element is ``((x0*y0 + x1*y1) + x2*y2) + ...`` regardless of
    the sizes of the free dimensions, so appending contraction terms that are
    exactly zero, or adding/removing unrelated rows, never changes a result.
    """
    k = x.shape[-1]
    cols = np.ascontiguousarray(np.moveaxis(x, -1, 0))[..., None]
    acc = cols[0] * y[..., 0:1, :]
    term = np.empty_like(acc)
    for j in range(1, k):
        np.multiply(cols[j], y[..., j : j + 1, :], out=term)
        acc += term
    return acc


def matmul(a, b, ordered: bool = False) -> Tensor:
    """Batched matrix product over the last two axes.

    ``ordered=True`` uses :func:`_ordered_matmul` for the forward value; it is
    used inside attention so that truncated sequences reproduce the full
    sequence bitwise at positions that cannot see the removed tokens.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    if ordered:
        out = _ordered_matmul(ad, bd)
    elif ad.ndim == 2 and bd.ndim == 2 and ad.shape[0] == 1:
        # single-row products go through gemv, which rounds differently from gemm
        out = (np.concatenate([ad, ad]) @ bd)[:1]
    else:
        out = ad @ bd

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), grad_fn, "matmul")


# -- normalisation / probabilities ---------------------------------------

def _ordered_sum_last(x: np.ndarray) -> np.ndarray:
    return np.add.accumulate(x, axis=-1)[..., -1:]


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; entries at ``-inf`` get probability 0.

    The normaliser is accumulated left to right so trailing zero-probability
    entries do not perturb the result.
    """
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / _ordered_sum_last(e)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (a,), grad_fn, "softmax")


def rms_norm(a: Tensor, eps: float = 1e-10) -> Tensor:
    x = a.data
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    y = x * r

    def grad_fn(g):
        return (r * (g - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _record(y, (a,), grad_fn, "rms_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of shape {table.shape}")
    out = table.data[ids]

    def grad_fn(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return _record(out, (table,), grad_fn, "embedding")


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    lp = log_softmax_np(logits.data)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    n = max(targets.size, 1)
    loss = -picked.sum() / n

    def grad_fn(g):
        p = np.exp(lp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (g * p / n,)

    return _record(np.asarray(loss), (logits,), grad_fn, "cross_entropy")


def squared_error(pred: Tensor, target, weight=None) -> Tensor:
    """Weighted mean of squared differences: sum(w * d^2) / sum(w)."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"squared_error: shapes {pred.shape} and {target.shape} differ")
    w = np.ones(pred.shape) if weight is None else np.broadcast_to(np.asarray(weight, dtype=float), pred.shape)
    d = pred.data - target.data
    denom = w.sum()
    loss = (w * d * d).sum() / denom

    def grad_fn(g):
        gp = g * 2.0 * w * d / denom
        return gp, -gp

    return _record(np.asarray(loss), (pred, target), grad_fn, "squared_error")


# -- backward ----------------------------------------------------------------

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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Returns a map from those leaves to the gradient contributed by this call.
    Unless ``retain_graph`` is set the graph is released and a second call
    raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed (pass retain_graph=True to reuse)")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node._parents == () and node._op != "leaf":
                raise GraphError("backward: graph already consumed (pass retain_graph=True to reuse)")
            if node.requires_grad:
                leaf_grads[node] = g
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if not retain_graph:
        for node in order:
            if node._grad_fn is not None:
                node._grad_fn = None
                node._parents = ()
            node._consumed = node._op != "leaf"
    return leaf_grads


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor. The error
    per coordinate is |a - c| / (|a| + |c| + 1e-12). ``indices`` restricts the
    check to selected flat coordinates.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=_DTYPE)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("grad_check: non-finite function value")
    backward(y)
    analytic = x.grad.reshape(-1)
    flat = base.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = f(Tensor(base)).item()
            flat[i] = old - eps
            fm = f(Tensor(base)).item()
            flat[i] = old
            c = (fp - fm) / (2 * eps)
            a = analytic[i]
            if not (np.isfinite(c) and np.isfinite(a)):
                raise FloatingPointError(f"grad_check: non-finite gradient at coordinate {i}")
            worst = max(worst, abs(a - c) / (abs(a) + abs(c) + 1e-12))
    return worst
