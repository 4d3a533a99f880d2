"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each :class:`Tensor` records the operation that produced it and a closure that
pushes its gradient to its parents. Calling :meth:`Tensor.backward` on a scalar
walks the graph in reverse topological order.

Broadcasting follows numpy; gradients flowing into a broadcast operand are
summed back to the operand's shape.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "exp",
    "log",
    "log1p",
    "expm1",
    "sigmoid",
    "relu",
    "swish",
    "where",
    "concat",
]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An array node in a differentiable computation graph."""

    __array_priority__ = 100.0

    def __init__(self, data, parents=(), op="", requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = None
        self.op = op

    # ---- basic properties

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __float__(self):
        return float(self.data)

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # ---- arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, (self, other), "add")

        def _backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,), "neg")
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, (self, other), "mul")

        def _backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        out._backward = _backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, (self, other), "div")

        def _backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / other.data**2, other.shape)
                )

        out._backward = _backward
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported; use exp(b * log(a))")
        e = float(exponent)
        out = Tensor(self.data**e, (self,), "pow")
        out._backward = lambda g: self._accumulate(g * e * self.data ** (e - 1.0))
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data @ other.data, (self, other), "matmul")

        def _backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        out._backward = _backward
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,), "getitem")

        def _backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        out._backward = _backward
        return out

    # ---- reductions and reshaping

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")

        def _backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        out._backward = _backward
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,), "reshape")
        out._backward = lambda g: self._accumulate(g.reshape(self.shape))
        return out

    @property
    def T(self):
        out = Tensor(self.data.T, (self,), "transpose")
        out._backward = lambda g: self._accumulate(g.T)
        return out

    # ---- graph traversal

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad; no graph was recorded")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are no longer needed
                    node.grad = None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss, leaves):
    """Gradients of scalar ``loss`` w.r.t. a ``{name: Tensor}`` mapping.

    Leaves the loss does not depend on get zero gradients.
    """
    for t in leaves.values():
        t.grad = None
    loss.backward()
    return {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaves.items()
    }


# ---- elementwise functions


def _unary(x, value, local_grad, op):
    x = as_tensor(x)
    out = Tensor(value, (x,), op)
    out._backward = lambda g: x._accumulate(g * local_grad())
    return out


def exp(x):
    x = as_tensor(x)
    v = np.exp(x.data)
    return _unary(x, v, lambda: v, "exp")


def log(x):
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data, "log")


def log1p(x):
    x = as_tensor(x)
    return _unary(x, np.log1p(x.data), lambda: 1.0 / (1.0 + x.data), "log1p")


def expm1(x):
    x = as_tensor(x)
    return _unary(x, np.expm1(x.data), lambda: np.exp(x.data), "expm1")


def _sigmoid(v):
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _unary(x, s, lambda: s * (1.0 - s), "sigmoid")


def relu(x):
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(np.float64), "relu")


def swish(x):
    """x * sigmoid(x), fused for a cheaper backward."""
    x = as_tensor(x)
    s = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _unary(x, x.data * s, lambda: s + x.data * s * (1.0 - s), "swish")


def where(cond, a, b):
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data), (a, b), "where")

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    out._backward = _backward
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    out._backward = _backward
    return out
