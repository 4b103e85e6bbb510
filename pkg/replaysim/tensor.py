"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a backward closure; calling
``backward`` on a scalar walks the recorded graph in reverse topological
order. Gradients are tracked for inputs as well as parameters, which is what
classifier guidance and the FGSM probe differentiate with respect to.
"""
import contextlib
import logging
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from replaysim.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], float, int]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._op = _op
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op or 'leaf'})"

    # Core attributes

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Operators

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def silu(self):
        return silu(self)


class Parameter(Tensor):
    """A named, trainable leaf tensor."""

    def __init__(self, data: ArrayLike, name: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


# =========================================================
# GRAPH PLUMBING
# =========================================================

def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)
    if track:
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # sum over axes that broadcasting introduced or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that is not on a recorded graph")

    order = _topological_order(loss)
    for node in order:
        if node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)
    loss.grad = loss.grad + np.ones_like(loss.data)

    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# =========================================================
# ELEMENTWISE OPS
# =========================================================

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)

    def _backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", _backward)


def neg(a: Tensor) -> Tensor:
    def _backward(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), "neg", _backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)

    def _backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", _backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def _backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _result(a.data ** exponent, (a,), "pow", _backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def _backward(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), "relu", _backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)

    def _backward(g):
        _accumulate(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _result(a.data * sig, (a,), "silu", _backward)


# =========================================================
# REDUCTIONS AND STRUCTURE
# =========================================================

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.data.ndim)

    def _backward(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", _backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tensor_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def _backward(g):
        a2 = a.data if a.data.ndim == 2 else a.data[None, :]
        b2 = b.data if b.data.ndim == 2 else b.data[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        _accumulate(a, (g2 @ b2.T).reshape(a.shape))
        _accumulate(b, (a2.T @ g2).reshape(b.shape))

    return _result(a.data @ b.data, (a, b), "matmul", _backward)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise DimensionError("concat", *(u.shape for u in tensors))
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), "concat", _backward)


def embedding(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; gradients scatter-add back into the table."""
    index = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError("embedding", table.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ContractError(f"embedding index out of range [0, {table.shape[0]})")

    def _backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, index, g)
            _accumulate(table, full)

    return _result(table.data[index], (table,), "embedding", _backward)


gather = embedding


# =========================================================
# PROBABILITIES AND LOSSES
# =========================================================

def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> Tensor:
    logits = _lift(logits)
    s = _softmax(logits.data, axis)

    def _backward(g):
        _accumulate(logits, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (logits,), "softmax", _backward)


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = _lift(logits)
    out = _log_softmax(logits.data, axis)

    def _backward(g):
        _accumulate(logits, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (logits,), "log_softmax", _backward)


def cross_entropy(logits, target, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of (N, C) or (C,) logits against integer classes."""
    logits = _lift(logits)
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise DimensionError("cross_entropy", logits.shape)
    target = np.asarray(target, dtype=np.int64)
    # a scalar class applies to every row
    target = np.full(z.shape[0], target) if target.ndim == 0 else target
    if target.shape[0] != z.shape[0]:
        raise DimensionError("cross_entropy", logits.shape, target.shape)
    num_classes = z.shape[1]
    if target.min() < 0 or target.max() >= num_classes:
        raise ContractError(f"cross_entropy target outside [0, {num_classes})")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")

    rows = np.arange(z.shape[0])
    logp = _log_softmax(z, axis=1)
    losses = -logp[rows, target]
    scale = 1.0 / z.shape[0] if reduction == "mean" else 1.0

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, target] -= 1.0
        grad *= scale * g
        _accumulate(logits, grad[0] if single else grad)

    return _result(np.asarray(losses.sum() * scale), (logits,), "cross_entropy", _backward)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size

    def _backward(g):
        _accumulate(a, g * 2.0 * diff / n)
        _accumulate(b, -g * 2.0 * diff / n)

    return _result(np.asarray((diff * diff).mean()), (a, b), "mse", _backward)
