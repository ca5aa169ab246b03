"""Tape-free reverse-mode autodiff over numpy arrays.

Every operation records its parents and a closure mapping the upstream
gradient to one gradient per parent. Complex arrays are supported for a real
scalar loss ``L``: the gradient stored for a complex tensor ``z`` is
``dL/dRe(z) + 1j * dL/dIm(z)``. With that convention a holomorphic map
``w = f(z)`` back-propagates ``g_z = g_w * conj(f'(z))``, and a real tensor
feeding a complex op simply keeps the real part of its gradient.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.iscomplexobj(arr) and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction -------------------------------------------------------

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- properties ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward -----------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate gradients into every leaf that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _reduce_to(pg, parent)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators ----------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    @property
    def mT(self):
        return swap_last(self)

    @property
    def H(self):
        return conj(swap_last(self))

    @property
    def real(self):
        return real(self)

    @property
    def imag(self):
        return imag(self)

    def conj(self):
        return conj(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Undo broadcasting and drop the imaginary part for real targets."""
    g = np.asarray(g)
    shape = t.shape
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = g.reshape(shape)
    if not t.is_complex and np.iscomplexobj(g):
        g = g.real
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * np.conj(bd) if a.requires_grad else None
        gb = g * np.conj(ad) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / np.conj(bd)
        return ga, -ga * np.conj(out)

    return Tensor._make(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = ad**exponent
    return Tensor._make(out, (a,), lambda g: (g * np.conj(exponent * ad ** (exponent - 1)),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * np.conj(out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / np.conj(ad),))


def log10(a) -> Tensor:
    return log(a) * (1.0 / np.log(10.0))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def conj(a) -> Tensor:
    a = as_tensor(a)
    if not a.is_complex:
        return a
    return Tensor._make(np.conj(a.data), (a,), lambda g: (np.conj(g),))


def real(a) -> Tensor:
    a = as_tensor(a)
    if not a.is_complex:
        return a
    return Tensor._make(a.data.real.copy(), (a,), lambda g: (g.astype(complex),))


def imag(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.imag(a.data).copy(), (a,), lambda g: (1j * g,))


def abs2(a) -> Tensor:
    """``|a|^2`` as a real tensor."""
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(np.abs(ad) ** 2, (a,), lambda g: (2.0 * g * ad,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    slope = np.where(x > 0, 1.0, neg + alpha)
    return Tensor._make(out, (a,), lambda g: (g * slope,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input is inside."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return Tensor._make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------------------
# shape and reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = a.data.size if axis is None else int(
        np.prod([a.shape[ax] for ax in ((axis,) if np.isscalar(axis) else axis)])
    )
    return tsum(a, axis, keepdims) * (1.0 / total)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return Tensor._make(out, ts, backward)


def diagonal(a) -> Tensor:
    """Main diagonal of the last two axes."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        idx = np.arange(min(shape[-2:]))
        out[..., idx, idx] = g
        return (out,)

    return Tensor._make(np.diagonal(a.data, axis1=-2, axis2=-1).copy(), (a,), backward)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.conj(np.swapaxes(bd, -1, -2)) if bd.ndim > 1 else np.multiply.outer(g, np.conj(bd))
        if b.requires_grad:
            gb = np.conj(np.swapaxes(ad, -1, -2)) @ g if ad.ndim > 1 else np.multiply.outer(np.conj(ad), g)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def solve(a, b) -> Tensor:
    """``a^-1 b`` for batched square ``a``; ``b`` has a trailing column axis."""
    a, b = as_tensor(a), as_tensor(b)
    ad = a.data
    x = np.linalg.solve(ad, b.data)

    def backward(g):
        gb = np.linalg.solve(np.conj(np.swapaxes(ad, -1, -2)), g)
        ga = -gb @ np.conj(np.swapaxes(x, -1, -2))
        return ga, gb

    return Tensor._make(x, (a, b), backward)


# ----------------------------------------------------------------------------
# losses


def bce_with_logits(logits, bits, mask=None, batch_size: int | None = None) -> Tensor:
    """Binary cross-entropy in bits, summed over bits, averaged over the batch.

    ``P(b=1) = sigmoid(logit)``. ``mask`` selects the entries that count,
    ``batch_size`` is the divisor (defaults to the leading dimension).
    """
    z = as_tensor(logits)
    x = z.data
    b = np.asarray(bits, dtype=float)
    w = np.ones_like(x) if mask is None else np.broadcast_to(np.asarray(mask, dtype=float), x.shape)
    n = x.shape[0] if batch_size is None else batch_size
    # -log P(b) = softplus(x) - b x, evaluated stably
    per_bit = np.maximum(x, 0) - b * x + np.log1p(np.exp(-np.abs(x)))
    loss = float((per_bit * w).sum() / (n * np.log(2.0)))
    scale = w / (n * np.log(2.0))
    return Tensor._make(np.array(loss), (z,), lambda g: (g * (_sigmoid(x) - b) * scale,))
