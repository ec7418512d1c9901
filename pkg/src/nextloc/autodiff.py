"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the next-location model needs are provided. Every op
records its parents and a closure that maps the output gradient to parent
gradients; :meth:`Tensor.backward` walks the graph in reverse topological
order.
"""

from __future__ import annotations

import math

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # graph construction ---------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        parents = tuple(p for p in parents)
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.data.shape, other.data.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.data.shape, other.data.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other, self.data.dtype) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if need_a else None
            gb = None
            if need_b:
                if a.ndim > 2 and b.ndim == 2:
                    # weight shared across leading axes: one big GEMM instead of a batched one
                    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return ga, gb

        return Tensor._make(a @ b, (self, other), backward)

    def __getitem__(self, index):
        src_shape = self.data.shape
        dtype = self.data.dtype

        def backward(g):
            out = np.zeros(src_shape, dtype=dtype)
            out[index] += g
            return (out,)

        return Tensor._make(self.data[index], (self,), backward)

    # shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        src_shape = self.data.shape
        return Tensor._make(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(src_shape),)
        )

    def transpose(self, *axes):
        inverse = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(*axes), (self,), lambda g: (g.transpose(*inverse),)
        )

    def sum(self, axis=None, keepdims=False):
        src_shape = self.data.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # elementwise nonlinearities --------------------------------------------

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g / (2.0 * out),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def gelu(self):
        """Tanh-approximated GELU."""
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * x * x * x)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def backward(g):
            d_inner = c * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

        return Tensor._make(out, (self,), backward)

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (self,), backward)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]`` for an integer index array of any shape."""
    index = np.asarray(index)
    vocab, width = table.data.shape
    dtype = table.data.dtype

    def backward(g):
        out = np.zeros((vocab, width), dtype=dtype)
        np.add.at(out, index.reshape(-1), g.reshape(-1, width))
        return (out,)

    return Tensor._make(table.data[index], (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    g_data = gain.data
    width = x.data.shape[-1]

    def backward(g):
        gxhat = g * g_data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = (g * xhat).reshape(-1, width).sum(axis=0)
        gbias = g.reshape(-1, width).sum(axis=0)
        return gx, ggain, gbias

    return Tensor._make(xhat * g_data + bias.data, (x, gain, bias), backward)
