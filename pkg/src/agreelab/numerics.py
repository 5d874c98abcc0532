"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op builds a :class:`Tensor` whose ``_backward`` closure maps the output
adjoint to one adjoint per parent.  :func:`backward` topologically orders the
graph reachable from a scalar loss (the :class:`ComputationRecord`) and replays
the closures in reverse.  Leaf gradients *accumulate* across calls; call
:func:`zero_grad` (or ``Tensor.zero_grad``) between steps.

Heavy transformer pieces (``linear``, ``layer_norm``, ``attention``,
``log_softmax``) are fused single ops with hand-written adjoints so a desk-scale
training step records a few hundred nodes rather than thousands.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
MASK_FILL = -1e30

_grad_enabled = True


class GraphError(RuntimeError):
    """Raised for malformed backward requests (non-scalar loss, detached graph)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result; only records the graph when some parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, so finite differences behave)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over empty axis")
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(np.where(cond, a.data, b.data), (a, b), backward, "where")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs tensors with ndim >= 2")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with x of shape [..., d_in] and weight [d_in, d_out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    d_in, d_out = weight.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(lead + (d_out,))

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), backward, "embedding")


def pick(a, index: np.ndarray) -> Tensor:
    """Gather ``a[..., index[...]]`` along the last axis (one entry per row)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ValueError(f"pick index shape {index.shape} != {a.shape[:-1]}")
    picked = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, index[..., None], g[..., None], axis=-1)
        return (out,)

    return _make(picked, (a,), backward, "pick")


# ---------------------------------------------------------------------------
# normalisation, softmax, attention
# ---------------------------------------------------------------------------

def _check_axis(t: Tensor, axis: int) -> int:
    if t.ndim == 0:
        raise ValueError("softmax needs at least one axis")
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"axis {axis} out of range for shape {t.shape}")
    axis %= t.ndim
    if t.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    return axis


def log_softmax(t, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax (max subtraction before exp)."""
    t = as_tensor(t)
    axis = _check_axis(t, axis)
    shifted = t.data - np.max(t.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (t,), backward, "log_softmax")


def softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    axis = _check_axis(t, axis)
    e = np.exp(t.data - np.max(t.data, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (t,), backward, "softmax")


def layer_norm(x, gain, offset, eps: float = 1e-5) -> Tensor:
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + offset.data

    def backward(g):
        d = x.shape[-1]
        g2 = g.reshape(-1, d)
        gxhat = g * gain.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        return gx, ggain, g2.sum(axis=0)

    return _make(out, (x, gain, offset), backward, "layer_norm")


def attention(q, k, v, keep: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention core.

    q: [B, Tq, d]; k, v: [B, Tk, d]; ``keep`` is a boolean array broadcastable to
    [B, 1, Tq, Tk] (True = attend).  Returns [B, Tq, d]; projections live outside.
    Every query row must keep at least one key.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    B, Tq, d = q.shape
    Tk = k.shape[1]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(B, Tq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.data.reshape(B, Tk, heads, dh).transpose(0, 2, 1, 3)
    vh = v.data.reshape(B, Tk, heads, dh).transpose(0, 2, 1, 3)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores = np.where(keep, scores, MASK_FILL)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(B, Tq, d)

    def backward(g):
        gh = g.reshape(B, Tq, heads, dh).transpose(0, 2, 1, 3)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh
        back = lambda a, T: a.transpose(0, 2, 1, 3).reshape(B, T, d)
        return back(gq, Tq), back(gk, Tk), back(gv, Tk)

    return _make(out, (q, k, v), backward, "attention")


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout; a no-op when not training or rate == 0."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

class ComputationRecord:
    """Ops reachable from a root tensor, in execution (topological) order."""

    def __init__(self, root: Tensor):
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.root = root
        self.ops = order

    def __len__(self):
        return len(self.ops)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.ops if t._backward is None]


def backward(loss: Tensor, record: ComputationRecord | None = None) -> ComputationRecord:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    Repeated calls accumulate; intermediate adjoints are never stored on tensors.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every requires_grad tensor")
    if record is None:
        record = ComputationRecord(loss)
    elif record.root is not loss:
        raise GraphError("record was built for a different loss")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.ops):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg
    return record


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], t: Tensor, eps: float = 1e-5,
                     indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``t``.

    ``t.data`` is perturbed in place and restored.  With ``indices`` only those
    entries are probed (others stay 0), which keeps large parameter checks cheap.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    probe = range(flat.size) if indices is None else [np.ravel_multi_index(i, t.shape) for i in indices]

    def evaluate():
        with no_grad():
            val = f(t)
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(val):
            raise FloatingPointError("non-finite function value during finite differencing")
        return val

    gflat = grad.reshape(-1)
    for i in probe:
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate()
        flat[i] = orig - eps
        lo = evaluate()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
