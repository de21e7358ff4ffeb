"""Dense float64 tensor with tape-based reverse-mode autodiff.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to one gradient per
parent.  :meth:`Tensor.backward` walks the graph in reverse topological
order, visiting every node once and summing gradients of shared inputs.

Random streams come from numpy's PCG64 generator.  Each component (weight
init, data generation, shuffling, augmentation, channel noise) gets its own
stream derived from ``(seed, offset)`` so they can be reproduced
independently of one another.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

DTYPE = np.float64

# Fixed offsets for per-component sub-streams.
STREAM_OFFSETS = {
    "init": 0,
    "data": 1,
    "shuffle": 2,
    "augment": 3,
    "channel": 4,
    "eval_channel": 5,
    "saliency": 6,
    "test_data": 7,
    "templates": 8,
}

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


def grad_enabled() -> bool:
    return _grad_enabled


def make_rng(seed: int, stream: str | int = 0, *keys: int) -> np.random.Generator:
    """PCG64 generator for ``stream`` derived from ``seed``.

    ``stream`` is either a name from ``STREAM_OFFSETS`` or a raw offset;
    extra integer ``keys`` (phase, epoch, ...) select further sub-streams.
    """
    offset = STREAM_OFFSETS[stream] if isinstance(stream, str) else int(stream)
    entropy = [int(seed), offset] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


class Tensor:
    """n-dimensional float64 array plus an accumulated gradient."""

    __slots__ = ("data", "_grad", "requires_grad", "retains_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.retains_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

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

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=DTYPE)

    def zero_grad(self) -> None:
        self._grad = None

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this non-leaf tensor after backward."""
        self.retains_grad = True
        return self

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents or node.retains_grad:
                node._grad = g.copy() if node._grad is None else node._grad + g
            if node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return unary("exp", self)

    def log(self):
        return unary("log", self)

    def sqrt(self):
        return unary("sqrt", self)

    def abs(self):
        return unary("abs", self)

    def relu(self):
        return unary("relu", self)

    def clamp_min(self, floor: float):
        return clamp_min(self, floor)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def elementwise(op: str, a, b) -> Tensor:
    """Binary ``add``/``sub``/``mul``/``div`` with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    x, y = a.data, b.data
    if op == "add":
        out = x + y
        back = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
    elif op == "sub":
        out = x - y
        back = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))
    elif op == "mul":
        out = x * y
        back = lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
    elif op == "div":
        out = x / y
        back = lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape))
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return make_result(out, (a, b), back)


def unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    if op == "exp":
        out = np.exp(x)
        back = lambda g: (g * out,)
    elif op == "log":
        out = np.log(x)
        back = lambda g: (g / x,)
    elif op == "sqrt":
        out = np.sqrt(x)
        back = lambda g: (g * 0.5 / out,)
    elif op == "abs":
        out = np.abs(x)
        back = lambda g: (g * np.sign(x),)
    elif op == "relu":
        out = np.maximum(x, 0.0)
        back = lambda g: (g * (x > 0),)
    else:
        raise ValueError(f"unknown unary op {op!r}")
    return make_result(out, (a,), back)


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    out = x**exponent
    return make_result(out, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    x = a.data
    return make_result(np.maximum(x, floor), (a,), lambda g: (g * (x >= floor),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    return make_result(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} into {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(old),))


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} is invalid for a tensor with {ndim} dimensions")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(op: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """``sum``, ``mean`` or ``max`` over ``axis`` (all axes when None)."""
    axes = _normalize_axes(axis, a.ndim)
    x = a.data
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1

    if op == "sum":
        out = x.sum(axis=axes, keepdims=True)
        back = lambda g: (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)
    elif op == "mean":
        out = x.mean(axis=axes, keepdims=True)
        back = lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)
    elif op == "max":
        out = peak = x.max(axis=axes, keepdims=True)

        def back(g):
            # route to the first maximal element in row-major order
            tail = tuple(range(x.ndim - len(axes), x.ndim))
            moved = np.moveaxis(x == peak, axes, tail)
            flat = moved.reshape(moved.shape[: x.ndim - len(axes)] + (-1,)).astype(DTYPE)
            idx = flat.argmax(axis=-1)
            mask = np.zeros_like(flat)
            np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
            mask = np.moveaxis(mask.reshape(moved.shape), tail, axes)
            return (mask * g.reshape(kept_shape),)
    else:
        raise ValueError(f"unknown reduce op {op!r}")
    if not keepdims:
        out = out.reshape([n for i, n in enumerate(x.shape) if i not in axes])
    return make_result(out, (a,), back)


# -- initialization ---------------------------------------------------------


def init(
    shape: Sequence[int],
    scheme: str = "kaiming_normal",
    rng: np.random.Generator | None = None,
    *,
    mean: float = 0.0,
    std: float = 1.0,
    value: float = 0.0,
    requires_grad: bool = True,
) -> Tensor:
    """Create a parameter tensor.

    Schemes: ``kaiming_normal`` (std = sqrt(2 / fan_in), fan_in = prod(shape[1:])),
    ``normal`` (``mean``, ``std``) and ``constant`` (``value``).
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise DimensionError(f"invalid shape {shape}")
    if scheme == "constant":
        data = np.full(shape, float(value), dtype=DTYPE)
    else:
        if rng is None:
            raise ValueError(f"scheme {scheme!r} needs an rng")
        if scheme == "kaiming_normal":
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif scheme == "normal":
            data = rng.normal(mean, std, size=shape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(DTYPE, copy=False), requires_grad=requires_grad)


# -- gradient checking ------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``f`` must return a scalar tensor and be deterministic.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if not x.requires_grad:
        raise ValueError("grad_check needs x.requires_grad=True")

    def value() -> float:
        with no_grad():
            out = f(x)
        if out.size != 1:
            raise DimensionError(f"f must return a scalar, got shape {out.shape}")
        v = out.item()
        if not math.isfinite(v):
            raise NumericError(f"f returned a non-finite value {v}")
        return v

    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise DimensionError(f"f must return a scalar, got shape {out.shape}")
    if not math.isfinite(out.item()):
        raise NumericError(f"f returned a non-finite value {out.item()}")
    out.backward()
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = value()
        flat[i] = orig - eps
        down = value()
        flat[i] = orig
        numeric[i] = (up - down) / (2 * eps)
    x.zero_grad()
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
