"""Dense reverse-mode automatic differentiation on top of numpy.

Every differentiable operation appends one node to the active :class:`Tape`.
Because nodes are only ever appended, insertion order is a topological
order and :func:`backward` is a single reverse sweep. All values are
float64.

Broadcasting follows numpy rules in ``add``/``sub``/``mul``; gradients are
summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from dlnlab.exceptions import NotScalar, ShapeMismatch

DTYPE = np.float64

_state = threading.local()


class Tape:
    """Append-only record of operations for one worker thread."""

    def __init__(self):
        self.nodes: list[tuple["Tensor", tuple, Callable]] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple, backward_fn: Callable) -> None:
        out._node = len(self.nodes)
        self.nodes.append((out, parents, backward_fn))

    def clear(self) -> None:
        """Drop the recorded graph; recorded outputs become constants."""
        for out, _, _ in self.nodes:
            out._node = None
            out.requires_grad = False
        self.nodes = []


def get_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev, tape.enabled = tape.enabled, False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = get_tape()
    needs = tape.enabled and any(p.requires_grad for p in parents)
    out = Tensor(value)
    if needs:
        out.requires_grad = True
        tape.record(out, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# -- elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def abs_(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


# -- reductions and shape ----------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, tuple(shape)) from None
    return _result(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing (the ``slice`` op)."""
    y = x.data[idx]

    def backward(g):
        z = np.zeros_like(x.data)
        np.add.at(z, idx, g)
        return (z,)

    return _result(np.array(y, dtype=DTYPE), (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *(t.shape for t in tensors)) from None
    ax = axis % y.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(y, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch("stack", *(t.shape for t in tensors))
    y = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % y.ndim
    return _result(
        y, tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))),
        "stack",
    )


# -- linear algebra ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy semantics for >= 2-d operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    try:
        y = a.data @ b.data
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(y, (a, b), backward, "matmul")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (the embedding-gather op)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table with {table.shape[0]} rows")

    def backward(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return _result(table.data[ids], (table,), backward, "embedding")


# -- normalisation ------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return _result(y, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


# -- losses ------------------------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch("mse_loss", pred.shape, target.shape)
    return mean(square(sub(pred, target)))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits[..., V]``.

    ``weights`` (same shape as ``targets``) masks positions out; the mean is
    then taken over the total weight.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch("cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range for {V} classes")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=DTYPE)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs positive total weight")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    value = -(w * picked).sum() / total

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        return (grad * (w / total)[..., None] * g,)

    return _result(np.asarray(value), (logits,), backward, "cross_entropy")


# -- driver ------------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or get_tape()
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = loss.grad + 1.0
        return
    pending: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for k in range(loss._node, -1, -1):
        g = pending.pop(k, None)
        if g is None:
            continue
        _, parents, fn = tape.nodes[k]
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._node is not None:
                if p._node in pending:
                    pending[p._node] = pending[p._node] + pg
                else:
                    pending[p._node] = pg
            else:
                p.grad = pg.copy() if p.grad is None else p.grad + pg


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, name=name)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
