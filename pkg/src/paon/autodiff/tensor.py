"""Dense tensor with tape-based reverse-mode differentiation.

Every differentiable operation executed while gradients are enabled appends an
entry to an implicit tape: a monotonically increasing sequence number, the
parent tensors and a closure mapping the output adjoint to parent adjoints.
:func:`backward` replays the entries reachable from the loss in exact reverse
execution order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from ..errors import NumericDomainError, UsageError

_SEQ = itertools.count()
_state = {"grad": True, "debug": False, "dtype": np.dtype(np.float32)}


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def shadow64():
    """Create new tensors in 64-bit precision (gradient-check path only)."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(np.float64)
    try:
        yield
    finally:
        _state["dtype"] = prev


def set_debug(flag: bool) -> None:
    """Toggle finiteness assertions on the output of every operation."""
    _state["debug"] = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    prev = _state["debug"]
    _state["debug"] = bool(flag)
    try:
        yield
    finally:
        _state["debug"] = prev


def default_dtype() -> np.dtype:
    return _state["dtype"]


@dataclass(eq=False)
class TapeEntry:
    seq: int
    name: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A dense array of reals that can take part in reverse-mode differentiation.

    Network activations are 4-D ``(N, C, H, W)``; parameters and reductions may
    have lower rank.
    """

    __slots__ = ("data", "requires_grad", "grad", "_entry", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._entry: TapeEntry | None = None
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar --------------------------------------------------------
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
        return scalar_mul(self, -1.0)

    def __pow__(self, k: int):
        return pow_elementwise(self, k)

    def __abs__(self):
        return abs_(self)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def make_op(name: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result and, when any parent is tracked, record it on the tape."""
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    out.name = None
    out._entry = TapeEntry(next(_SEQ), name, tuple(parents), backward_fn) if track else None
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NumericDomainError(f"non-finite output from op '{name}'")
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    Returns a mapping from each reached leaf to the gradient contributed by
    this call. Calling twice without resetting ``.grad`` accumulates.
    """
    if grad is None and loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)

    # outputs of reachable tape entries, keyed by sequence number
    produced: dict[int, Tensor] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._entry is not None:
            produced[t._entry.seq] = t
            stack.extend(p for p in t._entry.parents if p.requires_grad)

    adjoint: dict[int, np.ndarray] = {id(loss): seed}
    leaves: dict[int, Tensor] = {} if loss._entry is not None else {id(loss): loss}
    for seq in sorted(produced, reverse=True):
        out = produced[seq]
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(out._entry.parents, out._entry.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            adjoint[key] = adjoint[key] + pg if key in adjoint else pg
            if p._entry is None:
                leaves[key] = p

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.asarray(adjoint[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------------------
# elementwise arithmetic with broadcasting
# ---------------------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b, where: str = "div") -> Tensor:
    """Elementwise ``a / b``; ``where`` names the caller in the zero-divisor error."""
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        idx = tuple(int(i) for i in np.argwhere(b.data == 0)[0])
        raise NumericDomainError(f"division by zero in {where} at index {idx}")
    q = a.data / b.data

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * q, b.shape)

    return make_op("div", q, (a, b), bw)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return make_op("scalar_mul", a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def abs_(a: Tensor, subgrad_at_zero: float = 0.0) -> Tensor:
    """Elementwise ``|a|``; ``subgrad_at_zero`` picks the derivative used where ``a == 0``."""
    slope = np.sign(a.data)
    if subgrad_at_zero:
        slope = np.where(a.data == 0, a.dtype.type(subgrad_at_zero), slope)
    return make_op("abs", np.abs(a.data), (a,), lambda g: (g * slope,))


def pow_elementwise(a: Tensor, k: int) -> Tensor:
    if int(k) != k or k < 1:
        raise UsageError(f"power must be a positive integer, got {k}")
    k = int(k)
    if k == 1:
        return make_op("pow1", a.data, (a,), lambda g: (g,))
    out = a.data**k
    return make_op(f"pow{k}", out, (a,), lambda g: (g * (k * a.data ** (k - 1)),))


def sum_(a: Tensor) -> Tensor:
    return make_op("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return make_op("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * x.dtype.type(_INV_SQRT2)))
    pdf = x.dtype.type(_INV_SQRT2PI) * np.exp(-0.5 * x * x)
    return make_op("gelu", (x * cdf).astype(x.dtype), (a,), lambda g: (g * (cdf + x * pdf),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_op("tanh", y, (a,), lambda g: (g * (1 - y * y),))
