"""Dense double-precision tensors with a dynamic reverse-mode tape.

Every op is a :class:`Function` subclass with a numpy ``forward`` and a
``backward`` that maps the output gradient to one gradient per input.
The graph is only recorded when at least one input requires a gradient.
"""
from __future__ import annotations

import contextlib
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from ..errors import DomainError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_fn", "name", "__weakref__")

    # keep numpy from hijacking reflected operators like ndarray * Tensor
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._fn: Optional[Function] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # internal constructor, skips the defensive copy
        t = cls.__new__(cls)
        t.data = data if data.dtype == np.float64 else data.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t._fn = None
        t.name = None
        return t

    # -- array protocol -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, p: float):
        return Pow.apply(self, p=float(p))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __rmatmul__(self, other):
        return MatMul.apply(other, self)

    def __getitem__(self, idx):
        return GetItem.apply(self, idx=idx)

    # -- method sugar ---------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def tanh(self):
        return Tanh.apply(self)

    def relu(self):
        return Relu.apply(self)

    def abs(self):
        return Abs.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def backward(self, grad: Optional[np.ndarray] = None, inputs=None) -> None:
        backward(self, grad, inputs=inputs)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def parameter(data: Any, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from exc


class Function:
    """A node of the tape. Subclasses implement ``forward`` and ``backward``."""

    differentiable = True

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs) -> Tensor:
        return cls.run(*inputs, **kwargs)[0]

    @classmethod
    def run(cls, *inputs: ArrayLike, **kwargs):
        """Like ``apply`` but also return the node, for ops with side outputs."""
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out = Tensor._wrap(fn.forward(*(t.data for t in tensors), **kwargs))
        if _GRAD_ENABLED and cls.differentiable and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._fn = fn
        return out, fn


# ---------------------------------------------------------------- binary ops
class _Binary(Function):
    def forward(self, a, b):
        self.out_shape = _broadcast_shape(a.shape, b.shape)
        self.a_shape, self.b_shape = a.shape, b.shape
        return self._f(a, b)

    def _grads(self, grad):
        raise NotImplementedError

    def backward(self, grad):
        ga, gb = self._grads(grad)
        return (None if ga is None else _unbroadcast(ga, self.a_shape),
                None if gb is None else _unbroadcast(gb, self.b_shape))


class Add(_Binary):
    _f = staticmethod(np.add)

    def _grads(self, grad):
        return grad, grad


class Sub(_Binary):
    _f = staticmethod(np.subtract)

    def _grads(self, grad):
        return grad, -grad


class Mul(_Binary):
    def _f(self, a, b):
        self.a, self.b = a, b
        return a * b

    def _grads(self, grad):
        return grad * self.b, grad * self.a


class Div(_Binary):
    def _f(self, a, b):
        if np.any(b == 0):
            raise DomainError("division by zero")
        self.a, self.b = a, b
        return a / b

    def _grads(self, grad):
        ga = grad / self.b
        return ga, -ga * self.a / self.b


# ----------------------------------------------------------------- unary ops
class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError("log of non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(np.asarray(a, dtype=np.float64))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sin(Function):
    def forward(self, a):
        self.a = a
        return np.sin(a)

    def backward(self, grad):
        return (grad * np.cos(self.a),)


class Cos(Function):
    def forward(self, a):
        self.a = a
        return np.cos(a)

    def backward(self, grad):
        return (-grad * np.sin(self.a),)


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise DomainError("sqrt of negative value")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        safe = np.where(self.out > 0, self.out, 1.0)
        return (np.where(self.out > 0, grad * 0.5 / safe, 0.0),)


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Pow(Function):
    def forward(self, a, p):
        self.a, self.p = a, p
        return a ** p

    def backward(self, grad):
        return (grad * self.p * self.a ** (self.p - 1.0),)


class Clamp(Function):
    """Clamp with zero gradient outside ``[lo, hi]``."""

    def forward(self, a, lo=-np.inf, hi=np.inf):
        self.inside = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    def backward(self, grad):
        return (grad * self.inside,)


class ClampST(Function):
    """Straight-through clamp.

    Forward clamps to ``[lo, hi]``. Backward passes the gradient unchanged
    inside the range and zeroes it outside, matching the ordinary clamp on
    the interior while being explicit about the boundary being inclusive.
    """

    def forward(self, a, lo=-np.inf, hi=np.inf):
        self.inside = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    def backward(self, grad):
        return (np.where(self.inside, grad, 0.0),)


class StopGradient(Function):
    differentiable = False

    def forward(self, a):
        return a.copy()


class Where(Function):
    """Select between two tensors with a constant boolean mask."""

    def forward(self, a, b, mask=None):
        self.mask = np.asarray(mask, dtype=bool)
        self.a_shape, self.b_shape = a.shape, b.shape
        return np.where(self.mask, a, b)

    def backward(self, grad):
        return (_unbroadcast(np.where(self.mask, grad, 0.0), self.a_shape),
                _unbroadcast(np.where(self.mask, 0.0, grad), self.b_shape))


# ------------------------------------------------------------------- matmul
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-D")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        _broadcast_shape(a.shape[:-2], b.shape[:-2])
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ grad
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _check_extent(a: np.ndarray, axis) -> None:
    if axis is None:
        if a.size == 0:
            raise ShapeError("reduction over an empty tensor")
    elif any(a.shape[ax] == 0 for ax in axis):
        raise ShapeError("reduction over an empty axis")


def _expand_grad(grad, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(grad, (1,) * len(shape)), shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = _norm_axis(axis, a.ndim)
        _check_extent(a, self.axis)
        self.keepdims = keepdims
        self.shape = a.shape
        return np.sum(a, axis=self.axis, keepdims=keepdims)

    def backward(self, grad):
        return (np.array(_expand_grad(grad, self.shape, self.axis, self.keepdims)),)


class _ArgReduce(Function):
    """min / max along a single axis (or all). Gradient goes to the first extremum."""

    _arg = None
    _val = None

    def forward(self, a, axis=None, keepdims=False):
        if axis is not None and not isinstance(axis, int):
            raise ShapeError("min/max reduce over a single axis or all")
        self.shape = a.shape
        self.keepdims = keepdims
        self.axis = None if axis is None else axis % a.ndim
        _check_extent(a, None if self.axis is None else (self.axis,))
        if self.axis is None:
            self.idx = type(self)._arg(a.reshape(-1))
            out = a.reshape(-1)[self.idx]
            return np.reshape(out, (1,) * a.ndim) if keepdims else np.asarray(out)
        self.idx = np.expand_dims(type(self)._arg(a, axis=self.axis), self.axis)
        out = np.take_along_axis(a, self.idx, axis=self.axis)
        return out if keepdims else np.squeeze(out, axis=self.axis)

    def backward(self, grad):
        g = np.zeros(self.shape)
        if self.axis is None:
            g.reshape(-1)[self.idx] = np.asarray(grad).reshape(-1)[0]
            return (g,)
        gk = grad if self.keepdims else np.expand_dims(grad, self.axis)
        np.put_along_axis(g, self.idx, gk, axis=self.axis)
        return (g,)


class Max(_ArgReduce):
    _arg = staticmethod(np.argmax)


class Min(_ArgReduce):
    _arg = staticmethod(np.argmin)


class L2Norm(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = _norm_axis(axis, a.ndim)
        _check_extent(a, self.axis)
        self.a = a
        self.keepdims = keepdims
        self.norm = np.sqrt(np.sum(a * a, axis=self.axis, keepdims=True))
        return self.norm if keepdims else np.sqrt(np.sum(a * a, axis=self.axis))

    def backward(self, grad):
        g = grad if self.keepdims or self.axis is None else np.expand_dims(grad, self.axis)
        if self.axis is None:
            g = np.reshape(g, (1,) * self.a.ndim)
        safe = np.where(self.norm > 0, self.norm, 1.0)
        return (np.where(self.norm > 0, g * self.a / safe, 0.0),)


class Softmax(Function):
    def forward(self, a, axis=-1):
        if np.isnan(a).any():
            raise DomainError("softmax input contains NaN")
        self.axis = axis
        z = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(z)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=self.axis, keepdims=True)),)


# ------------------------------------------------------------- shape ops
class Reshape(Function):
    def forward(self, a, shape=None):
        self.shape = a.shape
        try:
            return np.reshape(a, shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc

    def backward(self, grad):
        return (np.reshape(grad, self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


class GetItem(Function):
    def forward(self, a, idx=None):
        self.shape = a.shape
        self.idx = idx
        return np.array(a[idx])

    def backward(self, grad):
        g = np.zeros(self.shape)
        if _is_basic_index(self.idx):
            g[self.idx] += grad
        else:
            np.add.at(g, self.idx, grad)
        return (g,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        if not arrays:
            raise ShapeError("concat of an empty list")
        ndim = arrays[0].ndim
        ax = axis % ndim
        ref = arrays[0].shape
        for a in arrays[1:]:
            if a.ndim != ndim or any(a.shape[i] != ref[i] for i in range(ndim) if i != ax):
                raise ShapeError(f"concat extent mismatch: {ref} vs {a.shape} on axis {ax}")
        self.axis = ax
        self.splits = np.cumsum([a.shape[ax] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


# ------------------------------------------------------------ functional API
def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def tanh(a):
    return Tanh.apply(a)


def relu(a):
    return Relu.apply(a)


def sin(a):
    return Sin.apply(a)


def cos(a):
    return Cos.apply(a)


def sqrt(a):
    return Sqrt.apply(a)


def clamp(a, lo=-np.inf, hi=np.inf):
    return Clamp.apply(a, lo=lo, hi=hi)


def clamp_st(a, lo=-np.inf, hi=np.inf):
    return ClampST.apply(a, lo=lo, hi=hi)


def where(mask, a, b):
    return Where.apply(a, b, mask=mask)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "sigmoid": sigmoid, "tanh": tanh, "relu": relu,
}


def op_elementwise(a, b=None, kind: str = "add", lo=-np.inf, hi=np.inf) -> Tensor:
    """Dispatch an elementwise op by name; ``b`` is ignored for unary kinds."""
    if kind == "clampST":
        return clamp_st(a, lo, hi)
    if kind in ("add", "sub", "mul", "div"):
        return _ELEMENTWISE[kind](a, b)
    try:
        return _ELEMENTWISE[kind](a)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


def matmul(a, b):
    return MatMul.apply(a, b)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    _check_extent(x.data, ax)
    count = x.size if ax is None else int(np.prod([x.shape[i] for i in ax]))
    return Sum.apply(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def max(x, axis=None, keepdims=False):  # noqa: A001
    return Max.apply(x, axis=axis, keepdims=keepdims)


def min(x, axis=None, keepdims=False):  # noqa: A001
    return Min.apply(x, axis=axis, keepdims=keepdims)


def l2norm(x, axis=None, keepdims=False):
    return L2Norm.apply(x, axis=axis, keepdims=keepdims)


def op_reduce(x, kind: str = "sum", axis=None, keepdims=False) -> Tensor:
    fns = {"sum": sum, "mean": mean, "min": min, "max": max, "L2norm": l2norm}
    if kind not in fns:
        raise ValueError(f"unknown reduction {kind!r}")
    return fns[kind](x, axis=axis, keepdims=keepdims)


def concat(parts: Iterable, axis=0) -> Tensor:
    return Concat.apply(*parts, axis=axis)


def stack(parts: Sequence, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack of an empty list")
    ax = axis % (parts[0].ndim + 1)
    expanded = [p.reshape(p.shape[:ax] + (1,) + p.shape[ax:]) for p in parts]
    return concat(expanded, axis=ax)


def slice_(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return GetItem.apply(x, idx=tuple(idx))


def stop_gradient(x) -> Tensor:
    return StopGradient.apply(x)


# ----------------------------------------------------------------- backward
def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        if node._fn is not None:
            for inp in node._fn.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack_.append((inp, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None,
             inputs: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves listed in ``inputs`` that the loss does not depend on get a zero
    gradient. Repeated calls accumulate.
    """
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise DomainError("loss is not finite")
        grad = np.ones_like(loss.data)
    if inputs is not None:
        for leaf in inputs:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._fn is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        in_grads = node._fn.backward(g)
        for inp, ig in zip(node._fn.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig
