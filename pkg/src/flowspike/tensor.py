"""Dense tensor with define-by-run reverse-mode differentiation.

A ``Tensor`` wraps a numpy array (float32 unless built from float64 data,
which the gradient-check oracles use). Each differentiable op records its
parents and a closure mapping the output gradient to parent gradients; the
graph is rebuilt on every forward pass.
"""
import threading
from contextlib import contextmanager

import numpy as np

from flowspike.errors import ShapeError

MAX_RANK = 4

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = _as_float_array(data, dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}", dim="rank")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the real work is in flowspike.ops
    def __add__(self, other):
        from flowspike import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from flowspike import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from flowspike import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from flowspike import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from flowspike import ops
        return ops.scale(self, -1.0)

    def sum(self):
        from flowspike import ops
        return ops.sum(self)

    def mean(self):
        from flowspike import ops
        return ops.mean(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_result(data, parents, backward_fn):
    """Wrap ``data`` as an op output, recording the graph edge when needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root):
    order = []
    seen = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, grad=None):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable requires_grad tensor."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}", dim="loss")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        return
    grads = {id(loss): grad}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
