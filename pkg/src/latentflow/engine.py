"""Reverse-mode automatic differentiation over numpy arrays.

A minimal tape-free engine in the micrograd style, lifted from scalars to
ndarrays: every op builds a closure that scatters the upstream gradient to
its inputs, and ``Tensor.backward`` replays the closures in reverse
topological order. float64 throughout; shapes follow numpy broadcasting,
with broadcast axes summed out on the way back.

Only the operations the training losses need are implemented. Nodes whose
inputs all have ``requires_grad=False`` are constants and carry no graph,
so frozen parameters and ``no_grad`` rollouts cost nothing at backward time.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (sampling, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == DTYPE:
        return x
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
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
    """An ndarray with an optional backward closure.

    `data` is always a float64 ndarray. `grad` is lazily allocated by the
    backward pass. Do not mutate `data` of a tensor that is part of a live
    graph; parameter updates happen between graphs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._prev: tuple = ()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, prev: tuple, backward: Callable[[], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = True
        out._backward = backward
        out._prev = prev
        return out

    @staticmethod
    def lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=DTYPE)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = Tensor.lift(other)
        data = self.data + other.data
        if not (_grad_enabled and (self.requires_grad or other.requires_grad)):
            return Tensor(data)
        a, b = self, other

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        out = Tensor._make(data, (a, b), backward)
        return out

    def __mul__(self, other):
        other = Tensor.lift(other)
        data = self.data * other.data
        if not (_grad_enabled and (self.requires_grad or other.requires_grad)):
            return Tensor(data)
        a, b = self, other

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        out = Tensor._make(data, (a, b), backward)
        return out

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-Tensor.lift(other))

    def __rsub__(self, other):
        return Tensor.lift(other) + (-self)

    def __radd__(self, other):
        return self + other

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        other = Tensor.lift(other)
        data = self.data / other.data
        if not (_grad_enabled and (self.requires_grad or other.requires_grad)):
            return Tensor(data)
        a, b = self, other

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * data / b.data, b.data.shape))

        out = Tensor._make(data, (a, b), backward)
        return out

    def __rtruediv__(self, other):
        return Tensor.lift(other) / self

    def __pow__(self, p):
        assert isinstance(p, (int, float)), "only scalar exponents"
        data = self.data ** p
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            a._accum(out.grad * p * a.data ** (p - 1))

        out = Tensor._make(data, (a,), backward)
        return out

    def __matmul__(self, other):
        other = Tensor.lift(other)
        data = np.matmul(self.data, other.data)
        if not (_grad_enabled and (self.requires_grad or other.requires_grad)):
            return Tensor(data)
        a, b = self, other
        a1, b1 = a.data.ndim == 1, b.data.ndim == 1

        def backward():
            g = out.grad
            if a.requires_grad:
                if a1 and b1:
                    ga = g * b.data
                elif b1:
                    ga = np.expand_dims(g, -1) * b.data
                elif a1:
                    ga = np.matmul(b.data, np.expand_dims(g, -1))[..., 0]
                else:
                    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                if a1 and b1:
                    gb = g * a.data
                elif a1:
                    gb = np.expand_dims(g, -2) * a.data[:, None]
                elif b1:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), np.expand_dims(g, -1))[..., 0]
                else:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(_unbroadcast(gb, b.data.shape))

        out = Tensor._make(data, (a, b), backward)
        return out

    # -- elementwise nonlinearities ---------------------------------------------

    def exp(self):
        data = np.exp(self.data)
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            a._accum(out.grad * data)

        out = Tensor._make(data, (a,), backward)
        return out

    def log(self):
        data = np.log(self.data)
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            a._accum(out.grad / a.data)

        out = Tensor._make(data, (a,), backward)
        return out

    def sqrt(self):
        data = np.sqrt(self.data)
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            a._accum(out.grad * 0.5 / data)

        out = Tensor._make(data, (a,), backward)
        return out

    def tanh(self):
        data = np.tanh(self.data)
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            a._accum(out.grad * (1.0 - data * data))

        out = Tensor._make(data, (a,), backward)
        return out

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            a._accum(out.grad * data * (1.0 - data))

        out = Tensor._make(data, (a,), backward)
        return out

    def softplus(self):
        # log(1 + e^x), computed stably; derivative is sigmoid(x)
        data = np.logaddexp(0.0, self.data)
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            a._accum(out.grad / (1.0 + np.exp(-a.data)))

        out = Tensor._make(data, (a,), backward)
        return out

    def gelu(self):
        # tanh approximation; smooth everywhere, cheap derivative
        x = self.data
        c = np.sqrt(2.0 / np.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        data = 0.5 * x * (1.0 + t)
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            di = c * (1.0 + 3 * 0.044715 * a.data ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * a.data * (1.0 - t * t) * di
            a._accum(out.grad * d)

        out = Tensor._make(data, (a,), backward)
        return out

    def clamp(self, lo: float | None, hi: float | None):
        """Clip values; gradient passes only where the input is inside the range."""
        data = np.clip(self.data, lo, hi)
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self
        inside = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            inside &= a.data >= lo
        if hi is not None:
            inside &= a.data <= hi

        def backward():
            a._accum(out.grad * inside)

        out = Tensor._make(data, (a,), backward)
        return out

    # -- reductions --------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy() if g.shape != a.data.shape else g)

        out = Tensor._make(np.asarray(data, dtype=DTYPE), (a,), backward)
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops -----------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            a._accum(out.grad.reshape(a.data.shape))

        out = Tensor._make(data, (a,), backward)
        return out

    def transpose(self, *axes):
        axes = axes if axes else None
        data = self.data.transpose(axes) if axes else self.data.T
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self
        inv = np.argsort(axes) if axes else None

        def backward():
            g = out.grad
            a._accum(g.transpose(inv) if inv is not None else g.T)

        out = Tensor._make(data, (a,), backward)
        return out

    def __getitem__(self, idx):
        data = self.data[idx]
        if not (_grad_enabled and self.requires_grad):
            return Tensor(data)
        a = self

        def backward():
            g = np.zeros(a.data.shape, dtype=DTYPE)
            np.add.at(g, idx, out.grad)
            a._accum(g)

        out = Tensor._make(np.asarray(data, dtype=DTYPE), (a,), backward)
        return out

    # -- autodiff ---------------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into `.grad` of graph leaves."""
        assert self.data.size == 1, "backward() requires a scalar output"
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            nid = id(node)
            if nid in visited:
                continue
            visited.add(nid)
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones(self.data.shape, dtype=DTYPE)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()


# -- free functions -------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    if not (_grad_enabled and any(t.requires_grad for t in tensors)):
        return Tensor(data)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    parts = tuple(tensors)

    def backward():
        g = out.grad
        sl = [slice(None)] * g.ndim
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    out = Tensor._make(data, parts, backward)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)
    if not (_grad_enabled and any(t.requires_grad for t in tensors)):
        return Tensor(data)
    parts = tuple(tensors)

    def backward():
        g = out.grad
        for i, t in enumerate(parts):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    out = Tensor._make(data, parts, backward)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = Tensor.lift(a), Tensor.lift(b)
    data = np.minimum(a.data, b.data)
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        return Tensor(data)
    take_a = a.data <= b.data  # ties route to the first argument

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accum(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~take_a, b.data.shape))

    out = Tensor._make(data, (a, b), backward)
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = Tensor.lift(a), Tensor.lift(b)
    data = np.maximum(a.data, b.data)
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        return Tensor(data)
    take_a = a.data >= b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accum(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~take_a, b.data.shape))

    out = Tensor._make(data, (a, b), backward)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Fused numerically-stable softmax along `axis`."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    if not (_grad_enabled and x.requires_grad):
        return Tensor(data)
    a = x

    def backward():
        g = out.grad
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accum(data * (g - dot))

    out = Tensor._make(data, (a,), backward)
    return out


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Parameter-free layer normalization: zero mean, unit variance along `axis`."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv
    if not (_grad_enabled and x.requires_grad):
        return Tensor(data)
    a = x
    n = x.data.shape[axis]

    def backward():
        g = out.grad
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * data).mean(axis=axis, keepdims=True)
        a._accum(inv * (g - gm - data * gy))

    out = Tensor._make(data, (a,), backward)
    return out


def embedding(table: Tensor, ids: np.ndarray | list) -> Tensor:
    """Row lookup `table[ids]`; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]
    if not (_grad_enabled and table.requires_grad):
        return Tensor(data)
    a = table

    def backward():
        g = np.zeros(a.data.shape, dtype=DTYPE)
        np.add.at(g, ids, out.grad)
        a._accum(g)

    out = Tensor._make(data, (a,), backward)
    return out


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w^T (+ b): x is (..., n_in), w is (n_out, n_in), b is (n_out,)."""
    out = x @ w.transpose()
    if b is not None:
        out = out + b
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum()


def norm2(a: Tensor) -> Tensor:
    return (a * a).sum().sqrt()


def check_finite(x: np.ndarray | Tensor, what: str = "tensor") -> None:
    arr = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
