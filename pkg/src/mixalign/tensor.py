"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive records a closure that maps the output
adjoint to input adjoints. ``Tensor.backward`` orders the recorded nodes
topologically (the tape), replays the closures in reverse, and then frees
the graph so each forward pass owns its own tape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "detach",
    "no_grad",
    "is_grad_enabled",
    "elementwise",
    "reduce",
    "matmul",
    "conv2d",
    "avg_pool2d",
    "softmax",
    "log_softmax",
    "softplus",
    "concat",
    "take",
    "unbroadcast",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for eval forwards)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
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
    """N-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- construction -----------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.grad = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return detach(self)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf."""
        if self.data.size != 1 or self.ndim > 1:
            raise ShapeError(f"backward needs a scalar of shape () or (1,), got {self.shape}")
        if not self.requires_grad:
            return
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        adjoints: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", as_tensor(other), self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", as_tensor(other), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", as_tensor(other), self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", as_tensor(other), self)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def relu(self):
        return elementwise("relu", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def square(self):
        return elementwise("square", self)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return reduce("var", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    @property
    def T(self):
        return _transpose(self, None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def detach(a: Tensor) -> Tensor:
    """Return a tensor sharing ``a``'s values that is excluded from the tape."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "detach"
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {"neg", "exp", "log", "relu", "sigmoid", "sqrt", "square", "abs"}
_BINARY = {"add", "sub", "mul", "div", "maximum"}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Apply a unary or broadcasting binary elementwise primitive.

    Unary kinds: neg, exp, log, relu, sigmoid, sqrt, square, abs.
    Binary kinds: add, sub, mul, div, maximum. ``log``/``div`` follow IEEE
    semantics on non-positive or zero operands.
    """
    a = as_tensor(a)
    if op_kind in _UNARY:
        if b is not None:
            raise TypeError(f"{op_kind} is unary")
        return _unary(op_kind, a)
    if op_kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if b is None:
        raise TypeError(f"{op_kind} needs two operands")
    b = as_tensor(b)
    _broadcast_shape(a, b)
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape

    if op_kind == "add":
        out = x + y

        def backward(g):
            return unbroadcast(g, sa), unbroadcast(g, sb)
    elif op_kind == "sub":
        out = x - y

        def backward(g):
            return unbroadcast(g, sa), unbroadcast(-g, sb)
    elif op_kind == "mul":
        out = x * y

        def backward(g):
            return (
                unbroadcast(g * y, sa) if a.requires_grad else None,
                unbroadcast(g * x, sb) if b.requires_grad else None,
            )
    elif op_kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x / y

        def backward(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                ga = unbroadcast(g / y, sa) if a.requires_grad else None
                gb = unbroadcast(-g * out / y, sb) if b.requires_grad else None
            return ga, gb
    else:  # maximum; ties route the adjoint to the first operand
        out = np.maximum(x, y)

        def backward(g):
            first = x >= y
            return unbroadcast(g * first, sa), unbroadcast(g * ~first, sb)

    return Tensor._make(out, (a, b), backward, op_kind)


def _unary(kind: str, a: Tensor) -> Tensor:
    x = a.data
    if kind == "neg":
        out = -x

        def backward(g):
            return (-g,)
    elif kind == "exp":
        out = np.exp(x)

        def backward(g):
            return (g * out,)
    elif kind == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)

        def backward(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (g / x,)
    elif kind == "relu":
        out = np.maximum(x, 0.0)

        def backward(g):
            return (g * (x > 0),)
    elif kind == "sigmoid":
        out = _sigmoid(x)

        def backward(g):
            return (g * out * (1.0 - out),)
    elif kind == "sqrt":
        out = np.sqrt(x)

        # zero subgradient at sqrt(0) keeps constant feature maps finite
        def backward(g):
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out > 0, g / (2.0 * safe), 0.0),)
    elif kind == "square":
        out = x * x

        def backward(g):
            return (2.0 * g * x,)
    else:  # abs
        out = np.abs(x)

        def backward(g):
            return (g * np.sign(x),)
    return Tensor._make(out, (a,), backward, kind)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)) evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * _sigmoid(x),)

    return Tensor._make(out, (a,), backward, "softplus")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op_kind: str, a: Tensor, axes=None, keep_dims: bool = False) -> Tensor:
    """Reduce over ``axes`` with sum, mean, max or population variance."""
    a = as_tensor(a)
    x = a.data
    axes_t = _normalize_axes(axes, x.ndim)
    count = 1
    for ax in axes_t:
        count *= x.shape[ax]
    if count == 0:
        raise ShapeError(f"empty reduction over axes {axes_t} of shape {x.shape}")
    kept_shape = tuple(1 if i in axes_t else n for i, n in enumerate(x.shape))

    def expand(g):
        return np.broadcast_to(g.reshape(kept_shape), x.shape)

    if op_kind == "sum":
        out = x.sum(axis=axes_t, keepdims=keep_dims)

        def backward(g):
            return (np.array(expand(g)),)
    elif op_kind == "mean":
        out = x.mean(axis=axes_t, keepdims=keep_dims)

        def backward(g):
            return (expand(g) / count,)
    elif op_kind == "max":
        out = x.max(axis=axes_t, keepdims=keep_dims)

        # ties share the adjoint equally
        def backward(g):
            mask = x == out.reshape(kept_shape)
            share = mask / mask.sum(axis=axes_t, keepdims=True)
            return (expand(g) * share,)
    elif op_kind == "var":
        centered = x - x.mean(axis=axes_t, keepdims=True)
        out = (centered * centered).mean(axis=axes_t, keepdims=keep_dims)

        def backward(g):
            return (expand(g) * (2.0 / count) * centered,)
    else:
        raise ValueError(f"unknown reduction {op_kind!r}")
    return Tensor._make(np.asarray(out), (a,), backward, op_kind)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def _reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return Tensor._make(out, (a,), backward, "reshape")


def _transpose(a: Tensor, axes) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._make(out, (a,), backward, "transpose")


def _index(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(out, (a,), backward, "index")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate adjoints."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._make(out, (a,), backward, "take")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = x @ y

    def backward(g):
        return (
            g @ y.T if a.requires_grad else None,
            x.T @ g if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), backward, "matmul")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x[B,C,H,W]`` with ``kernel[O,C,kh,kw]``, zero padding."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # cols[c, u, v, b, i, j] = xp[b, c, i*stride + u, j*stride + v]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, B, Ho, Wo))
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xt[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride]
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    w2d = kernel.data.reshape(O, C * kh * kw)
    out = (w2d @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gk = (gt @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2d.T @ gt).reshape(C, kh, kw, B, Ho, Wo)
            gxt = np.zeros((C, B, Hp, Wp))
            for u in range(kh):
                for v in range(kw):
                    gxt[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += gcols[:, u, v]
            gx = gxt.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding:padding + H, padding:padding + W]
            gx = np.ascontiguousarray(gx)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(out, parents, backward, "conv2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; spatial extents must be divisible by ``size``."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"spatial extent {H}x{W} not divisible by pool size {size}")
    scale = 1.0 / (size * size)
    out = np.zeros((B, C, H // size, W // size))
    for u in range(size):
        for v in range(size):
            out += x.data[:, :, u::size, v::size]
    out *= scale

    def backward(g):
        gx = np.empty(x.shape)
        share = g * scale
        for u in range(size):
            for v in range(size):
                gx[:, :, u::size, v::size] = share
        return (gx,)

    return Tensor._make(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(z: Tensor, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (z,), backward, "softmax")


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (z,), backward, "log_softmax")
