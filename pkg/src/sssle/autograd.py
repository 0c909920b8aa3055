"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each :class:`Tensor` records its parents and a closure that pushes its
gradient back to them; :meth:`Tensor.backward` walks the graph in reverse
topological order. All values are ``float64``.

Subgradient convention: the rectifier has derivative 0 at 0, and
max-reductions route the gradient to the first maximising entry.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def _make(self, data, parents, backward) -> "Tensor":
        parents = tuple(p for p in parents if p.requires_grad)
        out = Tensor(data, requires_grad=bool(parents), _parents=parents)
        if parents:
            out._backward = backward
        return out

    @staticmethod
    def _acc(t: "Tensor", g: np.ndarray) -> None:
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            Tensor._acc(self, _unbroadcast(g, self.shape))
            Tensor._acc(other, _unbroadcast(g, other.shape))
        return self._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            Tensor._acc(self, -g)
        return self._make(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            if self.requires_grad:
                Tensor._acc(self, _unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                Tensor._acc(other, _unbroadcast(g * self.data, other.shape))
        return self._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        if not other.requires_grad:
            return self * (1.0 / other.data)
        return self * other.reciprocal()

    def reciprocal(self):
        out_data = 1.0 / self.data

        def backward(g):
            Tensor._acc(self, -g * out_data * out_data)
        return self._make(out_data, (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                Tensor._acc(self, _unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                Tensor._acc(other, _unbroadcast(gb, other.shape))
        return self._make(self.data @ other.data, (self, other), backward)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # elementwise ----------------------------------------------------------

    def relu(self):
        pos = self.data > 0

        def backward(g):
            Tensor._acc(self, g * pos)
        return self._make(np.where(pos, self.data, 0.0), (self,), backward)

    rectify = relu

    def sigmoid(self):
        out_data = _sigmoid(self.data)

        def backward(g):
            Tensor._acc(self, g * out_data * (1.0 - out_data))
        return self._make(out_data, (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            Tensor._acc(self, g * out_data)
        return self._make(out_data, (self,), backward)

    def log(self):
        def backward(g):
            Tensor._acc(self, g / self.data)
        return self._make(np.log(self.data), (self,), backward)

    def softplus(self):
        """``log(1 + exp(x))`` evaluated without overflow."""
        x = self.data
        out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

        def backward(g):
            Tensor._acc(self, g * _sigmoid(x))
        return self._make(out_data, (self,), backward)

    # reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            Tensor._acc(self, np.broadcast_to(g, self.shape).copy())
        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int = -1, keepdims: bool = False):
        axis = axis % self.ndim
        idx = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(self.data)
            np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
            Tensor._acc(self, full)
        return self._make(out_data if keepdims else np.squeeze(out_data, axis), (self,), backward)

    # shape ----------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]

        def backward(g):
            Tensor._acc(self, g.reshape(self.shape))
        return self._make(self.data.reshape(shape), (self,), backward)

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)

        def backward(g):
            Tensor._acc(self, np.transpose(g, inv))
        return self._make(np.transpose(self.data, axes), (self,), backward)

    def __getitem__(self, key):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            Tensor._acc(self, full)
        return self._make(self.data[key], (self,), backward)

    # graph ----------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order, seen = [], set()
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior gradients are not needed once pushed to the parents
            node.grad = None


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            Tensor._acc(t, part)
    return tensors[0]._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(t.reshape(tuple(shape)))
    return concat(expanded, axis=axis)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    return _sigmoid(np.asarray(x, dtype=np.float64))
