"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Forward passes build a graph of :class:`Tensor` nodes; ``backward()`` on a
scalar node replays the recorded vector-Jacobian products in reverse
topological order. Only the operations the model pipelines need are
implemented. Gradients are exact for the computation actually performed
(reductions, clamps and tie-breaking included).
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node in the autodiff graph. ``data`` is always float64."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate gradients of this node into every ``requires_grad`` leaf.

        `seed` defaults to 1.0 and is only optional for scalar outputs.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.data.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {self.data.shape}")

        order = _toposort(self)
        grads = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                if parent._vjp is None and not parent.requires_grad:
                    continue  # constant leaf
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _toposort(root: Tensor):
    """Nodes reachable from root, children before parents."""
    order, seen, stack = [], set(), [(root, False)]
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
    return list(reversed(order))


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp) -> Tensor:
    """Create a graph node; skips recording when grads are off or unneeded."""
    if not _grad_enabled or not any(p.requires_grad or p._vjp is not None for p in parents):
        return Tensor(data)
    out = Tensor(data)
    out._parents = tuple(parents)
    out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    return _node(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a):
    a = _coerce(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def pow_const(a, exponent: float):
    a = _coerce(a)
    out = a.data ** exponent
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a):
    a = _coerce(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = _coerce(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    a = _coerce(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    return pow_const(a, 0.5)


def _matmul_grads(A: np.ndarray, B: np.ndarray, g: np.ndarray):
    if A.ndim == 1 and B.ndim == 1:
        return g * B, g * A
    if A.ndim == 1:  # (k,) @ (k, n) -> (n,)
        return B @ g, np.outer(A, g)
    if B.ndim == 1:  # (m, k) @ (k,) -> (m,)
        return np.outer(g, B), A.T @ g
    ga = g @ B.swapaxes(-1, -2)
    gb = A.swapaxes(-1, -2) @ g
    return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    return _node(a.data @ b.data, (a, b),
                 lambda g: _matmul_grads(a.data, b.data, g))


def transpose(a, axes=None):
    a = _coerce(a)
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    a = _coerce(a)
    return _node(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.data.shape),))


def tsum(a, axis=None, keepdims=False):
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _coerce(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return div(tsum(a, axis=axis, keepdims=keepdims), float(count))


def amax(a, axis=None, keepdims=False):
    """Max reduction; gradient is split evenly across tied maxima."""
    a = _coerce(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        full = out if keepdims or axis is None else np.expand_dims(out, axis)
        mask = (a.data == full).astype(np.float64)
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        return (mask / counts * gg,)

    return _node(out, (a,), vjp)


def getitem(a, idx):
    a = _coerce(a)
    out = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _node(out, tuple(tensors), vjp)


def clamp_min(a, floor: float):
    """max(a, floor); gradient flows only where a >= floor."""
    a = _coerce(a)
    out = np.maximum(a.data, floor)
    mask = (a.data >= floor).astype(np.float64)
    return _node(out, (a,), lambda g: (g * mask,))


def detach(a) -> Tensor:
    return Tensor(_coerce(a).data)


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis`.

    The max shift is a detached constant, which leaves both the value and
    the gradient of softmax unchanged.
    """
    a = _coerce(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


# operator wiring

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__pow__ = pow_const
Tensor.__getitem__ = getitem
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.max = amax
Tensor.reshape = reshape
Tensor.transpose = transpose
