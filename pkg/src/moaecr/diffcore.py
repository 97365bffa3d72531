"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive is a :class:`Function` subclass with a ``forward`` on raw
arrays and a ``backward`` mapping the output gradient to input gradients.
Applying a primitive records a node eagerly; :meth:`Tensor.backward` walks
the recorded nodes in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        grads = {id(self): np.ones_like(self.data)}
        for t in _topo_order(self):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            if node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            in_grads = node.fn.backward(node.ctx, g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not _needs_grad(inp):
                    continue
                ig = _unbroadcast(ig, inp.shape)
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    fn: type
    inputs: tuple
    ctx: dict = field(default_factory=dict)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _topo_order(root: Tensor) -> list[Tensor]:
    """Root first, leaves last; each tensor appears once."""
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            post.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if isinstance(inp, Tensor) and id(inp) not in seen and _needs_grad(inp):
                    stack.append((inp, False))
    post.reverse()
    return post


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """A differentiable primitive.

    ``forward(ctx, *arrays, **kw)`` returns the output array and may stash
    whatever ``backward(ctx, grad)`` needs in ``ctx``. ``backward`` returns
    one gradient (or None) per positional input, pre-broadcast shapes allowed.
    """

    @staticmethod
    def forward(ctx, *args, **kw):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kw) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx: dict = {}
        out = Tensor(cls.forward(ctx, *(t.data for t in tensors), **kw))
        if _grad_enabled and any(_needs_grad(t) for t in tensors):
            out._node = Node(cls, tensors, ctx)
        return out


# ----------------------------------------------------------------- elementwise


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, g):
        return g, g


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a - b

    @staticmethod
    def backward(ctx, g):
        return g, -g


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        return g * ctx["b"], g * ctx["a"]


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return g / b, -g * a / (b * b)


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class Abs(Function):
    """|x| with subgradient 0 at x == 0."""

    @staticmethod
    def forward(ctx, a):
        ctx["sign"] = np.sign(a)
        return np.abs(a)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["sign"],)


class Square(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["a"] = a
        return a * a

    @staticmethod
    def backward(ctx, g):
        return (2.0 * ctx["a"] * g,)


class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        if np.any(a < 0):
            raise DomainError("sqrt of a negative value")
        out = np.sqrt(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * 0.5 / ctx["out"],)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["out"],)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        if np.any(a <= 0):
            raise DomainError("log of a non-positive value")
        ctx["a"] = a
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx["a"],)


class Hinge(Function):
    """max(x - t, 0); the kink at x == t gets subgradient 0."""

    @staticmethod
    def forward(ctx, a, t=0.0):
        ctx["mask"] = (a > t).astype(DTYPE)
        return np.maximum(a - t, 0.0)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["mask"],)


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        axis = _norm_axis(axis, a.ndim)
        ctx.update(shape=a.shape, axis=axis, keepdims=keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        return (_expand(g, ctx["shape"], ctx["axis"], ctx["keepdims"]).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        axis = _norm_axis(axis, a.ndim)
        count = a.size if axis is None else math.prod(a.shape[i] for i in axis)
        ctx.update(shape=a.shape, axis=axis, keepdims=keepdims, count=count)
        return np.mean(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        return (_expand(g, ctx["shape"], ctx["axis"], ctx["keepdims"]) / ctx["count"],)


class Max(Function):
    """Max along one axis; ties send the whole gradient to the first argmax."""

    @staticmethod
    def forward(ctx, a, axis=-1, keepdims=False):
        (axis,) = _norm_axis(axis, a.ndim)
        idx = np.argmax(a, axis=axis)
        ctx.update(shape=a.shape, axis=axis, idx=idx, keepdims=keepdims)
        return np.max(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        axis = ctx["axis"]
        if ctx["keepdims"]:
            g = np.squeeze(g, axis)
        out = np.zeros(ctx["shape"], dtype=DTYPE)
        np.put_along_axis(out, np.expand_dims(ctx["idx"], axis), np.expand_dims(g, axis), axis)
        return (out,)


class LogSumExp(Function):
    """max(x) + log(sum(exp(x - max(x)))) along ``axis``."""

    @staticmethod
    def forward(ctx, a, axis=-1, keepdims=False):
        (axis,) = _norm_axis(axis, a.ndim)
        if a.shape[axis] == 0:
            raise DomainError("logsumexp over an empty axis")
        m = np.max(a, axis=axis, keepdims=True)
        e = np.exp(a - m)
        s = np.sum(e, axis=axis, keepdims=True)
        ctx.update(soft=e / s, axis=axis, keepdims=keepdims)
        out = m + np.log(s)
        return out if keepdims else np.squeeze(out, axis)

    @staticmethod
    def backward(ctx, g):
        if not ctx["keepdims"]:
            g = np.expand_dims(g, ctx["axis"])
        return (g * ctx["soft"],)


class Softmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        (axis,) = _norm_axis(axis, a.ndim)
        e = np.exp(a - np.max(a, axis=axis, keepdims=True))
        out = e / np.sum(e, axis=axis, keepdims=True)
        ctx.update(out=out, axis=axis)
        return out

    @staticmethod
    def backward(ctx, g):
        y = ctx["out"]
        return (y * (g - np.sum(g * y, axis=ctx["axis"], keepdims=True)),)


# ----------------------------------------------------------------- linear algebra / shape


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        if axes is None:
            axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        ctx["inv"] = tuple(np.argsort(axes))
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, ctx["inv"]),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape=()):
        ctx["shape"] = a.shape
        try:
            return np.reshape(a, shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc

    @staticmethod
    def backward(ctx, g):
        return (np.reshape(g, ctx["shape"]),)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        (axis,) = _norm_axis(axis, arrays[0].ndim)
        ctx["axis"] = axis
        ctx["bounds"] = np.cumsum([x.shape[axis] for x in arrays])[:-1]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            shapes = [x.shape for x in arrays]
            raise DimensionError(f"cannot concat shapes {shapes} on axis {axis}") from exc

    @staticmethod
    def backward(ctx, g):
        return tuple(np.split(g, ctx["bounds"], axis=ctx["axis"]))


class Index(Function):
    @staticmethod
    def forward(ctx, a, idx=None):
        ctx["shape"], ctx["idx"] = a.shape, idx
        return a[idx]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=DTYPE)
        np.add.at(out, ctx["idx"], g)
        return (out,)


class BroadcastTo(Function):
    @staticmethod
    def forward(ctx, a, shape=()):
        return np.broadcast_to(a, shape).copy()

    @staticmethod
    def backward(ctx, g):
        return (g,)  # reduced by _unbroadcast


# ----------------------------------------------------------------- functional API


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(a):
    return Neg.apply(a)


def tabs(a):
    return Abs.apply(a)


def square(a):
    return Square.apply(a)


def sqrt(a):
    return Sqrt.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def hinge(a, t: float = 0.0):
    return Hinge.apply(a, t=float(t))


def relu(a):
    return Hinge.apply(a, t=0.0)


def tsum(a, axis=None, keepdims=False):
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def tmax(a, axis=-1, keepdims=False):
    return Max.apply(a, axis=axis, keepdims=keepdims)


def logsumexp(a, axis=-1, keepdims=False):
    return LogSumExp.apply(a, axis=axis, keepdims=keepdims)


def softmax(a, axis=-1):
    return Softmax.apply(a, axis=axis)


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def matmul(a, b):
    return MatMul.apply(a, b)


def transpose(a, axes=None):
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def concat(tensors: Sequence, axis=0):
    return Concat.apply(*tensors, axis=axis)


def index(a, idx):
    return Index.apply(a, idx=idx)


def broadcast_to(a, shape):
    return BroadcastTo.apply(a, shape=tuple(shape))


def split_heads(x, h: int):
    """(..., p, d) -> (..., h, p, d/h)."""
    *lead, p, d = x.shape
    if d % h:
        raise DimensionError(f"width {d} not divisible by {h} heads")
    y = reshape(x, (*lead, p, h, d // h))
    nd = len(lead)
    return transpose(y, (*range(nd), nd + 1, nd, nd + 2))


def merge_heads(x):
    """(..., h, p, dh) -> (..., p, h*dh)."""
    *lead, h, p, dh = x.shape
    nd = len(lead)
    y = transpose(x, (*range(nd), nd + 1, nd, nd + 2))
    return reshape(y, (*lead, p, h * dh))


def l2_normalize(x, axis=-1):
    return div(x, sqrt(tsum(square(x), axis=axis, keepdims=True)))


# ----------------------------------------------------------------- gradient checking


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    checked: int
    skipped: list = field(default_factory=list)  # (input index, flat coordinate, reason)
    failure: str | None = None

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        msg = f"{status}: max rel err {self.max_rel_error:.3e} over {self.checked} coords"
        if self.skipped:
            msg += f", {len(self.skipped)} skipped"
        if self.failure:
            msg += f" ({self.failure})"
        return msg


def gradcheck(
    f: Callable[..., Tensor],
    inputs,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-4,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Coordinates where the one-sided slopes disagree are treated as sitting on
    a kink and skipped with reason ``"non-differentiable point"``. ``coords``
    limits the check to a random subset of coordinates per input.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = f(*inputs)
        if out.size != 1:
            raise ValueError("gradcheck needs a scalar-valued function")
        if not np.isfinite(out.data).all():
            return GradcheckReport(False, math.inf, 0, failure="non-finite f(x) at the base point")
        out.backward()
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    finally:
        for t, (rg, g) in zip(inputs, saved):
            t.requires_grad, t.grad = rg, g

    def value() -> float:
        with no_grad():
            return float(f(*inputs).data)

    f0 = float(out.data)
    worst, checked, skipped = 0.0, 0, []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        positions = range(flat.size)
        if coords is not None and coords < flat.size:
            rng = rng or np.random.default_rng(0)
            positions = sorted(rng.choice(flat.size, size=coords, replace=False))
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return GradcheckReport(False, math.inf, checked, skipped,
                                       failure=f"non-finite f near input {k} coord {i}")
            numeric = (fp - fm) / (2 * eps)
            right, left = (fp - f0) / eps, (f0 - fm) / eps
            if abs(right - left) > 1e-2 * max(1.0, abs(right), abs(left)):
                skipped.append((k, i, "non-differentiable point"))
                continue
            a = analytic[k].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            checked += 1
    failure = None if worst < tol else f"max rel err {worst:.3e} >= tol {tol:g}"
    return GradcheckReport(worst < tol, worst, checked, skipped, failure)
