"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a backward closure; :func:`grad` walks the
graph in reverse topological order. Broadcasting follows numpy rules and
gradients are summed back to the operand shape.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward value was NaN or infinite where a finite value is required."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray (op) Tensor defers to the Tensor's reflected method

    def __init__(self, data, requires_grad=False, name=None, op="leaf", parents=(), backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

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

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, parents=parents if req else (), backward=backward if req else None)


# -- elementwise binary ---------------------------------------------------
def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, "mul", (a, b), backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, "div", (a, b), backward)


def neg(a):
    a = _wrap(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, p):
    a = _wrap(a)
    p = float(p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(a.data**p, "pow", (a,), backward)


def square(a):
    a = _wrap(a)
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


# -- elementwise unary ----------------------------------------------------
def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = _wrap(a)
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _wrap(a)
    out = _sigmoid_np(a.data)
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    a = _wrap(a)
    s = _sigmoid_np(a.data)
    out = a.data * s

    def backward(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _node(out, "silu", (a,), backward)


def log_sigmoid(a):
    """log(1/(1+e^{-a})), stable for large |a|; infinite inputs map to 0 / -inf."""
    a = _wrap(a)
    out = -np.logaddexp(0.0, -a.data)

    def backward(g):
        return (g * _sigmoid_np(-a.data),)

    return _node(out, "log_sigmoid", (a,), backward)


def softplus(a):
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)
    return _node(out, "softplus", (a,), lambda g: (g * _sigmoid_np(a.data),))


def abs_(a):
    a = _wrap(a)
    return _node(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


# -- reductions and shape -------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = _wrap(a)
    return _node(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _wrap(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = gg @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ gg
        if a.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def getitem(a, idx):
    a = _wrap(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], "getitem", (a,), backward)


def take(a, index, axis):
    """Gather along ``axis`` with an integer index array of any shape."""
    a = _wrap(a)
    index = np.asarray(index)

    def backward(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (out,)

    return _node(np.take(a.data, index, axis=axis), "take", (a,), backward)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), backward)


def where(mask, a, b):
    a, b = _wrap(a), _wrap(b)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _node(np.where(mask, a.data, b.data), "where", (a, b), backward)


# -- differentiation ------------------------------------------------------
def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(f):
    """Reverse sweep from scalar ``f``; returns a dict id(node) -> gradient."""
    if f.size != 1:
        raise ValueError(f"grad requires a scalar output, got shape {f.shape}")
    order = _toposort(f)
    for node in order:
        if not np.all(np.isfinite(node.data)):
            label = node.name or node.op
            raise NonFiniteError(f"non-finite value in forward pass at node '{label}' (shape {node.shape})")
    grads = {id(f): np.ones_like(f.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return grads


def grad(f, params):
    """Gradients of scalar ``f`` with respect to ``params``.

    ``params`` may be a list of tensors or a mapping name -> tensor (a
    :class:`~pagoda.nd.params.ParamSet` works); the return type mirrors it.
    Parameters ``f`` does not depend on get zero gradients.
    """
    grads = backward(f)
    if hasattr(params, "items"):
        return {k: grads.get(id(t), np.zeros_like(t.data)) for k, t in params.items()}
    return [grads.get(id(t), np.zeros_like(t.data)) for t in params]
