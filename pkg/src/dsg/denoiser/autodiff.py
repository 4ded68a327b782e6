"""Minimal reverse-mode tape over float64 numpy arrays.

This carries exactly the operations the reference network and its losses
need; gradients are verified against central finite differences by the
gradient-check harness.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node.parents:
                visit(p)
            order.append(node)

        visit(self)
        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is not None:
                node.backward_fn(node.grad)

    # operator sugar used by the network code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value, (a, b))

    def back(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad += _unbroadcast(g, b.value.shape)

    out.backward_fn = back
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value - b.value, (a, b))

    def back(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad -= _unbroadcast(g, b.value.shape)

    out.backward_fn = back
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value * b.value, (a, b))

    def back(g):
        a.grad += _unbroadcast(g * b.value, a.value.shape)
        b.grad += _unbroadcast(g * a.value, b.value.shape)

    out.backward_fn = back
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value / b.value, (a, b))

    def back(g):
        a.grad += _unbroadcast(g / b.value, a.value.shape)
        b.grad += _unbroadcast(-g * a.value / (b.value ** 2), b.value.shape)

    out.backward_fn = back
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value @ b.value, (a, b))

    def back(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    out.backward_fn = back
    return out


def gather_rows(table, idx):
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(table.value[idx], (table,))

    def back(g):
        np.add.at(table.grad, idx, g)

    out.backward_fn = back
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]

    def back(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            t.grad += piece

    out.backward_fn = back
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.value.reshape(shape), (a,))

    def back(g):
        a.grad += g.reshape(a.value.shape)

    out.backward_fn = back
    return out


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,))

    def back(g):
        if axis is None:
            a.grad += np.broadcast_to(g, a.value.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.grad += np.broadcast_to(gg, a.value.shape)

    out.backward_fn = back
    return out


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.value, 0.0), (a,))

    def back(g):
        a.grad += g * (a.value > 0.0)

    out.backward_fn = back
    return out


def tanh(a):
    a = as_tensor(a)
    val = np.tanh(a.value)
    out = Tensor(val, (a,))

    def back(g):
        a.grad += g * (1.0 - val ** 2)

    out.backward_fn = back
    return out


def sigmoid(a):
    a = as_tensor(a)
    val = 1.0 / (1.0 + np.exp(-a.value))
    out = Tensor(val, (a,))

    def back(g):
        a.grad += g * val * (1.0 - val)

    out.backward_fn = back
    return out


def tabs(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.value), (a,))

    def back(g):
        a.grad += g * np.sign(a.value)

    out.backward_fn = back
    return out


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.maximum(a.value, b.value), (a, b))

    def back(g):
        pick_a = a.value >= b.value
        a.grad += _unbroadcast(g * pick_a, a.value.shape)
        b.grad += _unbroadcast(g * (~pick_a), b.value.shape)

    out.backward_fn = back
    return out


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.minimum(a.value, b.value), (a, b))

    def back(g):
        pick_a = a.value <= b.value
        a.grad += _unbroadcast(g * pick_a, a.value.shape)
        b.grad += _unbroadcast(g * (~pick_a), b.value.shape)

    out.backward_fn = back
    return out


def tlog(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.value), (a,))

    def back(g):
        a.grad += g / a.value

    out.backward_fn = back
    return out


def softmax(a):
    """Row-wise stable softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(val, (a,))

    def back(g):
        dot = (g * val).sum(axis=-1, keepdims=True)
        a.grad += val * (g - dot)

    out.backward_fn = back
    return out


def softmax_cross_entropy(logits, targets):
    """Per-row CE of a (M, K) logit matrix at integer targets; fused backward."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(targets.shape[0])
    losses = logz - shifted[rows, targets]
    out = Tensor(losses, (logits,))
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def back(g):
        grad = probs * g[:, None]
        grad[rows, targets] -= g
        logits.grad += grad

    out.backward_fn = back
    return out
