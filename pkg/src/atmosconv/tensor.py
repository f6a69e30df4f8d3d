"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable primitive returns a new :class:`Tensor` and, when any
input requires a gradient, attaches a :class:`Record` holding the closure that
maps the output gradient to input gradients. :func:`backward` linearises the
records reachable from a scalar loss into a :class:`Tape` (topological order)
and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError, StateError

DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True
_guided = False
_branches: Optional[list] = None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def guided_relu() -> Iterator[None]:
    """During backward passes run inside this block, relu also drops negative
    incoming gradients (guided backpropagation)."""
    global _guided
    prev, _guided = _guided, True
    try:
        yield
    finally:
        _guided = prev


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch taken by every piecewise op (relu mask, abs sign,
    pooling argmax) evaluated inside the block, in call order."""
    global _branches
    prev, _branches = _branches, []
    try:
        yield _branches
    finally:
        _branches = prev


def note_branch(pattern: np.ndarray) -> None:
    if _branches is not None:
        _branches.append(pattern.copy())


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class Record:
    """One primitive application on the tape."""

    op: str
    inputs: tuple
    output_id: int
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    consumed: bool = False

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)


@dataclass
class Tape:
    """Records reachable from one output, inputs always before consumers."""

    records: list[Record] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: "Tensor") -> "Tape":
        order: list[Record] = []
        seen: set[int] = set()
        if out._record is None:
            return cls(order)
        stack = [(out._record, False)]
        while stack:
            rec, expanded = stack.pop()
            if expanded:
                order.append(rec)
                continue
            if id(rec) in seen:
                continue
            seen.add(id(rec))
            stack.append((rec, True))
            for t in rec.inputs:
                if t._record is not None and id(t._record) not in seen:
                    stack.append((t._record, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    """Dense N-d float64 array that can take part in reverse-mode autodiff."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.id = next(_ids)
        self._record: Optional[Record] = None

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self) -> "Tensor":
        if not self.is_finite():
            raise NumericError(f"non-finite values in tensor {self.name or self.id}")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # -- operator sugar ------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple, bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.id = next(_ids)
    out._record = None
    need = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = need
    if need:
        out._record = Record(op, inputs, out.id, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor, retain_graph: bool = False) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that
    requires a gradient. Returns the tape that was walked."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return Tape()
    tape = Tape.from_output(loss)
    for rec in tape.records:
        if rec.consumed:
            raise StateError(
                f"tape record '{rec.op}' was consumed by an earlier backward; "
                "use retain_graph=True to differentiate the same graph twice")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
        if not retain_graph:
            rec.consumed = True
            rec.backward = None
    return tape


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting. A python scalar operand is
    treated as a constant (scalar multiplication)."""
    if np.isscalar(b):
        c = float(b)
        return _make(a.data * c, "scale", (a,), lambda g: (g * c,))
    if np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * out / bd, bd.shape)
        return ga, gb

    return _make(out, "div", (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _make(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = a.data > 0
    note_branch(mask)

    def bwd(g):
        if _guided:
            return (g * (mask & (g > 0)),)
        return (g * mask,)

    return _make(a.data * mask, "relu", (a,), bwd)


def split_pos_neg(a: Tensor) -> tuple[Tensor, Tensor]:
    """Return (max(a, 0), max(-a, 0)), both differentiable."""
    return relu(a), relu(neg(a))


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    note_branch(s)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bwd(g):
        return (np.broadcast_to(g.reshape(kshape), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), "sum", (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bwd(g):
        return (np.broadcast_to(g.reshape(kshape) / count, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), "mean", (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))
