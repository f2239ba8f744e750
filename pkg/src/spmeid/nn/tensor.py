"""Reverse-mode automatic differentiation over dense numpy tensors.

Small by design: float32 compute with an implicit float64 shadow mode
(feed float64 leaves and every op stays in float64, which the gradient
tests use), broadcasting on the elementwise ops, batched matmul, and a
handful of fused primitives (softmax) where the naive composition would
dominate the training profile.

A backward pass releases the tape; calling ``backward`` twice on the same
root raises ``AutodiffError("stale tape")``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..errors import AutodiffError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_spent")

    # make numpy defer to the reflected operators instead of building
    # object arrays when an ndarray is the left operand
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None
        self._spent = False

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _lift(value, like: "Tensor") -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=like.data.dtype))

    @classmethod
    def _from_op(cls, data, parents, bwd) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._bwd = bwd
        else:
            out._parents = ()
            out._bwd = None
        out._spent = False
        return out

    # -- bookkeeping ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, " \
               f"requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        # accumulation always rebinds (no in-place math), so aliasing with a
        # child's grad buffer is harmless
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self, seed=None):
        """Populate ``grad`` on every reachable leaf; frees the tape."""
        if self._spent:
            raise AutodiffError("stale tape: backward() already consumed this graph")
        if not self.requires_grad:
            raise AutodiffError("backward() on a tensor with no recorded graph")
        if seed is None:
            if self.data.size != 1:
                raise AutodiffError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)

        # iterative topological order
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = seed
        for node in reversed(order):
            if node._bwd is None:
                continue
            node._bwd(node.grad)
            node._bwd = None
            node._parents = ()
            node._spent = True
            if node is not self:
                node.grad = None  # interior grads are not retained
        self._spent = True

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other, self)
        out = Tensor._from_op(self.data + other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._bwd = bwd
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = Tensor._lift(other, self)
        out = Tensor._from_op(self.data * other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))
            out._bwd = bwd
        return out

    __rmul__ = __mul__

    def __sub__(self, other):
        other = Tensor._lift(other, self)
        out = Tensor._from_op(self.data - other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-g, other.data.shape))
            out._bwd = bwd
        return out

    def __rsub__(self, other):
        return Tensor._lift(other, self).__sub__(self)

    def __truediv__(self, other):
        other = Tensor._lift(other, self)
        out = Tensor._from_op(self.data / other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(
                        -g * self.data / (other.data * other.data),
                        other.data.shape))
            out._bwd = bwd
        return out

    def __rtruediv__(self, other):
        return Tensor._lift(other, self).__truediv__(self)

    def __neg__(self):
        out = Tensor._from_op(-self.data, (self,), None)
        if out.requires_grad:
            out._bwd = lambda g: self._accumulate(-g)
        return out

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise AutodiffError("pow supports scalar exponents only")
        out = Tensor._from_op(self.data ** exponent, (self,), None)
        if out.requires_grad:
            def bwd(g):
                self._accumulate(g * exponent * self.data ** (exponent - 1))
            out._bwd = bwd
        return out

    # -- transcendental -----------------------------------------------------

    def exp(self):
        data = np.exp(self.data)
        out = Tensor._from_op(data, (self,), None)
        if out.requires_grad:
            out._bwd = lambda g: self._accumulate(g * data)
        return out

    def log(self):
        out = Tensor._from_op(np.log(self.data), (self,), None)
        if out.requires_grad:
            out._bwd = lambda g: self._accumulate(g / self.data)
        return out

    def sqrt(self):
        data = np.sqrt(self.data)
        out = Tensor._from_op(data, (self,), None)
        if out.requires_grad:
            out._bwd = lambda g: self._accumulate(g * 0.5 / data)
        return out

    def tanh(self):
        data = np.tanh(self.data)
        out = Tensor._from_op(data, (self,), None)
        if out.requires_grad:
            out._bwd = lambda g: self._accumulate(g * (1.0 - data * data))
        return out

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor._from_op(data, (self,), None)
        if out.requires_grad:
            out._bwd = lambda g: self._accumulate(g * data * (1.0 - data))
        return out

    def asinh(self):
        out = Tensor._from_op(np.arcsinh(self.data), (self,), None)
        if out.requires_grad:
            def bwd(g):
                self._accumulate(g / np.sqrt(self.data * self.data + 1.0))
            out._bwd = bwd
        return out

    def gelu(self):
        x = self.data
        phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = Tensor._from_op(x * phi, (self,), None)
        if out.requires_grad:
            def bwd(g):
                pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
                self._accumulate(g * (phi + x * pdf))
            out._bwd = bwd
        return out

    def clip(self, lo: float, hi: float):
        """Clamp into [lo, hi]; gradient is zero where clamped."""
        data = np.clip(self.data, lo, hi)
        out = Tensor._from_op(data, (self,), None)
        if out.requires_grad:
            mask = (self.data > lo) & (self.data < hi)
            out._bwd = lambda g: self._accumulate(g * mask)
        return out

    # -- linear algebra / shape ----------------------------------------------

    def __matmul__(self, other):
        other = Tensor._lift(other, self)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise AutodiffError("matmul requires operands with ndim >= 2")
        out = Tensor._from_op(self.data @ other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(
                        g @ other.data.swapaxes(-1, -2), self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(
                        self.data.swapaxes(-1, -2) @ g, other.data.shape))
            out._bwd = bwd
        return out

    def __rmatmul__(self, other):
        return Tensor._lift(other, self).__matmul__(self)

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims),
                              (self,), None)
        if out.requires_grad:
            def bwd(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape))
            out._bwd = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else \
            np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        out = Tensor._from_op(self.data.reshape(shape), (self,), None)
        if out.requires_grad:
            out._bwd = lambda g: self._accumulate(g.reshape(src))
        return out

    def swapaxes(self, a: int, b: int):
        out = Tensor._from_op(self.data.swapaxes(a, b), (self,), None)
        if out.requires_grad:
            out._bwd = lambda g: self._accumulate(g.swapaxes(a, b))
        return out

    def __getitem__(self, index):
        """Basic (slice/int/ellipsis) indexing only."""
        out = Tensor._from_op(self.data[index], (self,), None)
        if out.requires_grad:
            def bwd(g):
                full = np.zeros_like(self.data)
                full[index] += g
                self._accumulate(full)
            out._bwd = bwd
        return out

    def broadcast_to(self, shape):
        out = Tensor._from_op(np.broadcast_to(self.data, shape).copy(),
                              (self,), None)
        if out.requires_grad:
            out._bwd = lambda g: self._accumulate(_unbroadcast(g, self.data.shape))
        return out

    def item(self) -> float:
        return float(self.data)


# ---------------------------------------------------------------------------
# Free functions
# ---------------------------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    out = Tensor._from_op(np.concatenate(datas, axis=axis), tensors, None)
    if out.requires_grad:
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def bwd(g):
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(a, b)
                    t._accumulate(g[tuple(idx)])
        out._bwd = bwd
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Fused softmax; safe with -inf masked entries (the max is taken after
    masking, so fully masked positions never occur by construction)."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._from_op(p, (x,), None)
    if out.requires_grad:
        def bwd(g):
            inner = (g * p).sum(axis=axis, keepdims=True)
            x._accumulate(p * (g - inner))
        out._bwd = bwd
    return out


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target."""
    diff = pred - Tensor._lift(target, pred)
    return (diff * diff).mean()
