"""Dense numpy tensors with reverse-mode differentiation.

Every differentiable op builds an output :class:`Tensor` that remembers its
inputs and a closure mapping the output gradient to input gradients. Graph
nodes are only recorded when some input requires a gradient.
"""
from __future__ import annotations

import numpy as np

from ..errors import ContractError, DoubleBackwardError, ShapeError

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- introspection --------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph ----------------------------------------------------------
    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def backward(self) -> None:
        backward(self)

    # -- operators (implemented in ops) ---------------------------------
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import add, neg
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        from .ops import add, neg
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        from .ops import neg
        return neg(self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        from .ops import mul
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)

    def sum(self, axis=None):
        from .ops import sum_
        return sum_(self, axis)

    def mean(self, axis=None):
        from .ops import mean
        return mean(self, axis)

    def reshape(self, *shape):
        from .ops import reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        from .ops import transpose
        return transpose(self)

    @property
    def T(self):
        return self.transpose()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _DEFAULT_DTYPE))


def make_node(data, parents, backward_fn) -> Tensor:
    """Wrap an op result; record the backward rule if any parent needs grads."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _toposort(root: Tensor) -> list:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with ``requires_grad``.

    The graph is released afterwards; calling again on the same loss raises
    :class:`DoubleBackwardError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise DoubleBackwardError("graph already released by a previous backward()")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"backward produced grad {pg.shape} for input {p.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True
