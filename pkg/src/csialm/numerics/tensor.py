"""Dense ndarray-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure computing the
vector-Jacobian product. ``Tensor.backward`` orders the reachable graph
topologically (the tape) and replays it in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError

_state = {"dtype": np.dtype(np.float32), "grad": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the storage precision, e.g. to float64 for gradient checks."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.name = None
        return out

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # graph bookkeeping -------------------------------------------------

    def _topo(self) -> list["Tensor"]:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = self._topo()
        for node in tape:
            if node._backward is not None:
                node.grad = None
        seed = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(tape):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                # C-contiguous storage keeps later reductions independent of how g was produced
                g = np.ascontiguousarray(g)
                parent.grad = g if parent.grad is None else parent.grad + g

    # arithmetic --------------------------------------------------------

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
        return _op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        x = self.data
        return _op(_power(x, exponent), (self,), lambda g: (g * exponent * _power(x, exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # shape / reductions -----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor._wrap(x)
    return Tensor(x)


def _op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce(a, b, dtype=None):
    if not isinstance(a, Tensor):
        a = Tensor._wrap(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor._wrap(np.asarray(b, dtype=a.data.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * y, x.shape) if a.requires_grad else None,
            _unbroadcast(g * x, y.shape) if b.requires_grad else None,
        )

    return _op(x * y, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y = a.data, b.data
    out = x / y

    def backward(g):
        return (
            _unbroadcast(g / y, x.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / y, y.shape) if b.requires_grad else None,
        )

    return _op(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if y.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ y.T).reshape(g.shape[:-1] + (y.shape[0],))
                ga = _unbroadcast(ga, x.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if b.requires_grad:
            if y.ndim == 2:
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    if y.ndim == 2:
        # one large GEMM instead of a batched loop
        out = (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[1],))
    else:
        out = x @ y
    return _op(out, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _op(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    shape, dtype = a.shape, a.dtype
    fancy = _is_fancy(idx)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _op(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _op(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def split(a: Tensor, sections, axis: int = 0) -> list[Tensor]:
    """Split into equal ``sections`` (int) or at the given sizes (list)."""
    n = a.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise DimensionError(f"cannot split extent {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise DimensionError(f"split sizes {sizes} do not sum to extent {n}")
    out, start = [], 0
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + size)
        out.append(getitem(a, tuple(sl)))
        start += size
    return out


# elementwise ---------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _op(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _op(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))


def _power(x: np.ndarray, e: float) -> np.ndarray:
    # small integer powers by repeated multiplication; np.power on float32 is very slow
    if float(e).is_integer() and 0 <= e <= 4:
        out = np.ones_like(x)
        for _ in range(int(e)):
            out = out * x
        return out
    return x**e


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation used by GPT-2."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _op(out, (a,), backward)


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = _coerce(a, b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(np.where(mask, g, 0), sa), _unbroadcast(np.where(mask, 0, g), sb)

    return _op(np.where(mask, a.data, b.data), (a, b), backward)




