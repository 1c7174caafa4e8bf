"""Dense tensors with a small reverse-mode tape.

Values are held as float64 numpy arrays regardless of the storage precision
used on disk. Every operation that touches a tensor with ``requires_grad``
records a node carrying its parents and a backward rule; ``backward`` replays
those nodes in reverse recording order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "tensor",
    "elementwise",
    "matmul",
    "softmax_lastdim",
    "concat",
    "split",
    "stack",
    "backward",
    "gradient_check",
    "gradient_check_params",
    "no_grad",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_counter)
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def tanh(self):
        return elementwise("tanh", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def relu(self):
        return elementwise("relu", self)

    def softplus(self):
        return softplus(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return self * self

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


# -- elementwise ------------------------------------------------------------

_UNARY = {"exp", "log", "tanh", "sigmoid", "relu"}
_BINARY = {"add", "sub", "mul", "div"}


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a} with {b}") from exc


def elementwise(kind: str, a, b=None) -> Tensor:
    """Apply an elementwise operation; binary kinds broadcast on trailing axes."""
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        a, b = _as_tensor(a), _as_tensor(b)
        _broadcast_shape(a.shape, b.shape)
        x, y = a.data, b.data
        sa, sb = a.shape, b.shape
        if kind == "add":
            return _make(x + y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), kind)
        if kind == "sub":
            return _make(x - y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), kind)
        if kind == "mul":
            return _make(
                x * y, (a, b), lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)), kind
            )
        if np.any(y == 0):
            raise DomainError("div: zero divisor")
        out = x / y
        return _make(
            out, (a, b), lambda g: (_unbroadcast(g / y, sa), _unbroadcast(-g * out / y, sb)), kind
        )
    if kind not in _UNARY:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if b is not None:
        raise ShapeError(f"{kind} takes one operand")
    a = _as_tensor(a)
    x = a.data
    if kind == "exp":
        out = np.exp(x)
        return _make(out, (a,), lambda g: (g * out,), kind)
    if kind == "log":
        if np.any(x <= 0):
            raise DomainError("log: non-positive operand")
        return _make(np.log(x), (a,), lambda g: (g / x,), kind)
    if kind == "tanh":
        out = np.tanh(x)
        return _make(out, (a,), lambda g: (g * (1.0 - out * out),), kind)
    if kind == "sigmoid":
        out = _sigmoid(x)
        return _make(out, (a,), lambda g: (g * out * (1.0 - out),), kind)
    out = np.maximum(x, 0.0)
    return _make(out, (a,), lambda g: (g * (x > 0),), kind)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero."""
    a = _as_tensor(a)
    x = a.data
    if np.any(x < 0):
        raise DomainError("sqrt: negative operand")
    out = np.sqrt(x)

    def rule(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _make(out, (a,), rule, "sqrt")


def clamp_min(a, floor: float) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _make(np.maximum(x, floor), (a,), lambda g: (g * (x >= floor),), "clamp_min")


# -- reductions and layout ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), rule, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return reduce_sum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    out = a.data[index]

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), rule, "getitem")


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(np.array(out), (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; other extents must agree."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: mismatched shapes {ts[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def split(a, groups: int, axis: int = -1) -> list[Tensor]:
    """Cut ``axis`` into ``groups`` equal, contiguous pieces."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if groups < 1 or n % groups:
        raise ShapeError(f"split: extent {n} not divisible into {groups} groups")
    width = n // groups
    index = [slice(None)] * a.ndim
    pieces = []
    for k in range(groups):
        index[ax] = slice(k * width, (k + 1) * width)
        pieces.append(getitem(a, tuple(index)))
    return pieces


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with broadcast batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.shape[-1]} != {b.shape[-2]}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), sa)
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, sb)
        return ga, gb

    return _make(x @ y, (a, b), rule, "matmul")


def softmax_lastdim(a) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax over an empty last dimension")
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), rule, "softmax")


# -- tape replay ------------------------------------------------------------------

def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_: list[Tensor] = [root]
    while stack_:
        node = stack_.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack_.extend(p for p in node._parents if p.requires_grad)
    # recording order is a valid topological order
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every tracked leaf."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = _collect(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.array(pg, dtype=np.float64)


# -- finite-difference checking --------------------------------------------------

def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-4,
    indices: Iterable[int] | None = None,
) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` against central differences.

    Returns max |analytic - numeric| / max(1, |analytic|, |numeric|) over the
    checked components (all of them unless ``indices`` selects flat positions).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError("gradient_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad
    flat = base.reshape(-1)
    idx = range(flat.size) if indices is None else list(indices)
    worst = 0.0
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = old - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("gradient_check: f is non-finite near x")
            num = (fp - fm) / (2.0 * eps)
            ana = analytic.reshape(-1)[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst


def gradient_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-4,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Finite-difference check of ``loss_fn`` against the tape, over parameter leaves.

    Parameters are perturbed in place and restored. ``samples_per_param``
    limits the number of components probed in each tensor.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if samples_per_param is None or samples_per_param >= flat.size:
                idx = np.arange(flat.size)
            else:
                idx = rng.choice(flat.size, size=samples_per_param, replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + eps
                fp = loss_fn().item()
                flat[i] = old - eps
                fm = loss_fn().item()
                flat[i] = old
                num = (fp - fm) / (2.0 * eps)
                ana = analytic[name].reshape(-1)[i]
                worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    for p in params.values():
        p.grad = None
    return worst
