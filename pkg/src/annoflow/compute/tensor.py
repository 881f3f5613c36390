"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tensor wraps an ndarray and, while gradients are enabled, records the
operation that produced it. backward() walks the recorded graph once in
reverse topological order and accumulates adjoints into every node that
requires a gradient. Only the operations the models in this package need are
implemented; all of them are vectorized over the batch dimension, so graphs
stay small even for large batches.
"""

from contextlib import contextmanager

import numpy as np

from ..errors import ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block. Nestable."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph walk ---------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(node, grad):
    if node.requires_grad:
        node.grad = grad if node.grad is None else node.grad + grad


def _unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, backward):
    out = Tensor(data)
    tracked = tuple(p for p in parents if p.requires_grad)
    if _grad_enabled and tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward
    return out


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(grad, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-grad * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def power(a, exponent):
    a = _wrap(a)
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(grad):
        _accumulate(a, grad * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(grad):
        _accumulate(a, grad @ b.data.T)
        _accumulate(b, a.data.T @ grad)

    return _make(data, (a, b), backward)


# -- elementwise nonlinearities ----------------------------------------------


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(grad):
        _accumulate(a, grad * data)

    return _make(data, (a,), backward)


def log(a):
    a = _wrap(a)
    data = np.log(a.data)

    def backward(grad):
        _accumulate(a, grad / a.data)

    return _make(data, (a,), backward)


def sqrt(a):
    a = _wrap(a)
    data = np.sqrt(a.data)

    def backward(grad):
        _accumulate(a, grad * 0.5 / data)

    return _make(data, (a,), backward)


def tanh(a):
    a = _wrap(a)
    data = np.tanh(a.data)

    def backward(grad):
        _accumulate(a, grad * (1.0 - data * data))

    return _make(data, (a,), backward)


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(grad):
        _accumulate(a, grad * (a.data > 0.0))

    return _make(data, (a,), backward)


def sigmoid(a):
    a = _wrap(a)
    data = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    data = np.where(a.data >= 0.0, data, 1.0 - data)

    def backward(grad):
        _accumulate(a, grad * data * (1.0 - data))

    return _make(data, (a,), backward)


def softplus(a):
    a = _wrap(a)
    data = np.logaddexp(0.0, a.data)

    def backward(grad):
        s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
        s = np.where(a.data >= 0.0, s, 1.0 - s)
        _accumulate(a, grad * s)

    return _make(data, (a,), backward)


def clip(a, lo, hi):
    """Hard clip with the almost-everywhere subgradient (1 inside, 0 outside)."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)

    def backward(grad):
        _accumulate(a, grad * ((a.data > lo) & (a.data < hi)))

    return _make(data, (a,), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis, keepdims=False):
    a = _wrap(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    summed = np.exp(a.data - shift).sum(axis=axis, keepdims=True)
    data = np.log(summed) + shift
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(grad):
        g = grad if keepdims else np.expand_dims(grad, axis)
        soft = np.exp(a.data - shift) / summed
        _accumulate(a, g * soft)

    return _make(data, (a,), backward)


# -- structural ops -----------------------------------------------------------


def concat(tensors, axis=1):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    widths = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * grad.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, grad[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def take_cols(a, index):
    """Select (or permute) columns of a 2-d tensor by integer index array."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError("take_cols expects a 2-d tensor")
    data = a.data[:, index]

    def backward(grad):
        g = np.zeros_like(a.data)
        np.add.at(g, (slice(None), index), grad)
        _accumulate(a, g)

    return _make(data, (a,), backward)


def gather_rows(a, index):
    """Select rows of a 2-d tensor; repeated indices sum their adjoints."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-d tensor")
    data = a.data[index]

    def backward(grad):
        g = np.zeros_like(a.data)
        np.add.at(g, index, grad)
        _accumulate(a, g)

    return _make(data, (a,), backward)
