"""Small reverse-mode autodiff over dense 2-D float64 arrays.

Only the primitives needed for MLPs and the training objectives are provided.
Every op returns a new :class:`Tensor` that remembers its parents and a closure
that pushes the output gradient back to them.  :func:`backward` orders the graph
topologically (the computation record) and runs the closures in reverse.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """A 2-D float64 array with a gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad=False, _parents=(), _op="leaf"):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values produced by {_op}")
        arr.flags.writeable = False
        self.values = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs shape (1, 1), got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def set_values(self, values):
        """Replace the values in place (used by optimizers); shape is fixed."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.values.shape:
            raise ShapeError(f"cannot assign {arr.shape} into {self.values.shape}")
        arr.flags.writeable = False
        self.values = arr

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents, op):
    out = Tensor(values, requires_grad=any(p.requires_grad for p in parents), _parents=parents, _op=op)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- primitives -------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = _result(a.values @ b.values, (a, b), "matmul")

    def _backward(g):
        if a.requires_grad:
            a.grad += g @ b.values.T
        if b.requires_grad:
            b.grad += a.values.T @ g

    out._backward = _backward
    return out


def add_bias(x, bias):
    """Row-broadcast add of a (1, n) bias to an (r, n) matrix."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.shape != (1, x.shape[1]):
        raise ShapeError(f"add_bias: shape mismatch {x.shape} + {bias.shape}")
    out = _result(x.values + bias.values, (x, bias), "add_bias")

    def _backward(g):
        x.grad += g
        bias.grad += g.sum(axis=0, keepdims=True)

    out._backward = _backward
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    out = _result(a.values + b.values, (a, b), "add")

    def _backward(g):
        a.grad += g
        b.grad += g

    out._backward = _backward
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    out = _result(a.values - b.values, (a, b), "sub")

    def _backward(g):
        a.grad += g
        b.grad -= g

    out._backward = _backward
    return out


def mul(a, b):
    """Elementwise product; same shapes only."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    out = _result(a.values * b.values, (a, b), "mul")

    def _backward(g):
        if a.requires_grad:
            a.grad += g * b.values
        if b.requires_grad:
            b.grad += g * a.values

    out._backward = _backward
    return out


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    out = _result(x.values * c, (x,), "scale")

    def _backward(g):
        x.grad += g * c

    out._backward = _backward
    return out


def rsub_scalar(c, x):
    """c - x for a python scalar c."""
    x = as_tensor(x)
    out = _result(float(c) - x.values, (x,), "rsub_scalar")

    def _backward(g):
        x.grad -= g

    out._backward = _backward
    return out


def relu(x):
    x = as_tensor(x)
    mask = x.values > 0
    out = _result(np.where(mask, x.values, 0.0), (x,), "relu")

    def _backward(g):
        x.grad += g * mask

    out._backward = _backward
    return out


def softmax(x):
    """Row-wise softmax."""
    x = as_tensor(x)
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = _result(s, (x,), "softmax")

    def _backward(g):
        x.grad += s * (g - (g * s).sum(axis=1, keepdims=True))

    out._backward = _backward
    return out


def sigmoid(x):
    x = as_tensor(x)
    v = x.values
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    s[~pos] = ev / (1.0 + ev)
    out = _result(s, (x,), "sigmoid")

    def _backward(g):
        x.grad += g * s * (1.0 - s)

    out._backward = _backward
    return out


def log(x):
    x = as_tensor(x)
    if np.any(x.values <= 0):
        raise ValueError("log: non-positive argument; clamp before taking logs")
    out = _result(np.log(x.values), (x,), "log")

    def _backward(g):
        x.grad += g / x.values

    out._backward = _backward
    return out


def power(x, p):
    """Elementwise x**p for a scalar exponent; x must be positive unless p is an integer."""
    x = as_tensor(x)
    p = float(p)
    if not p.is_integer() and np.any(x.values <= 0):
        raise ValueError("power: non-positive base with fractional exponent")
    out = _result(np.power(x.values, p), (x,), "power")

    def _backward(g):
        x.grad += g * p * np.power(x.values, p - 1.0)

    out._backward = _backward
    return out


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the value was inside."""
    x = as_tensor(x)
    inside = (x.values >= lo) & (x.values <= hi)
    out = _result(np.clip(x.values, lo, hi), (x,), "clip")

    def _backward(g):
        x.grad += g * inside

    out._backward = _backward
    return out


def hconcat(*xs):
    xs = [as_tensor(x) for x in xs]
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise ShapeError("hconcat: row mismatch " + " vs ".join(str(x.shape) for x in xs))
    out = _result(np.hstack([x.values for x in xs]), tuple(xs), "hconcat")
    edges = np.cumsum([0] + [x.shape[1] for x in xs])

    def _backward(g):
        for x, lo, hi in zip(xs, edges[:-1], edges[1:]):
            if x.requires_grad:
                x.grad += g[:, lo:hi]

    out._backward = _backward
    return out


def vconcat(*xs):
    xs = [as_tensor(x) for x in xs]
    cols = {x.shape[1] for x in xs}
    if len(cols) != 1:
        raise ShapeError("vconcat: column mismatch " + " vs ".join(str(x.shape) for x in xs))
    out = _result(np.vstack([x.values for x in xs]), tuple(xs), "vconcat")
    edges = np.cumsum([0] + [x.shape[0] for x in xs])

    def _backward(g):
        for x, lo, hi in zip(xs, edges[:-1], edges[1:]):
            x.grad += g[lo:hi]

    out._backward = _backward
    return out


def take_rows(x, rows):
    """Gather rows (repeats allowed)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp).reshape(-1)
    out = _result(x.values[rows], (x,), "take_rows")

    def _backward(g):
        if x.requires_grad:
            np.add.at(x.grad, rows, g)

    out._backward = _backward
    return out


def pick(x, rows, cols):
    """Gather individual elements x[rows[k], cols[k]] into a column vector."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp).reshape(-1)
    cols = np.asarray(cols, dtype=np.intp).reshape(-1)
    if rows.shape != cols.shape:
        raise ShapeError(f"pick: index shape mismatch {rows.shape} vs {cols.shape}")
    out = _result(x.values[rows, cols].reshape(-1, 1), (x,), "pick")

    def _backward(g):
        np.add.at(x.grad, (rows, cols), g[:, 0])

    out._backward = _backward
    return out


def total(x):
    """Sum of all entries as a (1, 1) tensor."""
    x = as_tensor(x)
    out = _result(x.values.sum(keepdims=True).reshape(1, 1), (x,), "sum")

    def _backward(g):
        x.grad += g[0, 0]

    out._backward = _backward
    return out


def zero():
    return Tensor(0.0)


# -- backward ---------------------------------------------------------------


def computation_record(root):
    """Return the graph under ``root`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tensor reachable from ``loss``.

    Intermediate gradients are reset first, so calling twice doubles the leaf
    gradients but does not compound intermediates.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1, 1) loss, got {loss.shape}")
    order = computation_record(loss)
    if len(order) == 1 and loss._backward is None:
        raise ValueError("backward on an empty computation record")
    for node in order:
        if node._backward is not None:
            node.zero_grad()
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.requires_grad:
            node._backward(node.grad)
    for node in order:
        if not np.all(np.isfinite(node.grad)):
            raise FloatingPointError(f"non-finite gradient at {node.op}")
