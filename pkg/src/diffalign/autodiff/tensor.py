"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input is tracked (``requires_grad``).  Each record keeps the
arrays its backward rule needs in ``saved``; that tuple is the only state
the backward pass reads, so releasing it is what frees memory.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, NumericOverflowError, ShapeError, TapeReuseError


class Tensor:
    """A dense array of float64 values that can sit on a tape."""

    __array_priority__ = 1000
    __hash__ = object.__hash__

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

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
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __neg__(self):
        return negate(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


GradFn = Callable[[np.ndarray, tuple], Sequence["np.ndarray | None"]]


class _Record:
    __slots__ = ("op", "inputs", "output", "saved", "vjp")

    def __init__(self, op, inputs, output, saved, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.saved = saved
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; records are appended in execution order, which
    is a topological order of the graph.  A tape can be differentiated once.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeReuseError("tape already consumed by backward; record a new one")
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        top = _STATE.tapes.pop()
        assert top is self

    def __len__(self) -> int:
        return len(self.records)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def saved_value_count(self) -> int:
        """Number of float64 values currently held for the backward pass."""
        total = 0
        for rec in self.records:
            if rec.saved:
                total += sum(int(np.size(s)) for s in rec.saved)
        return total

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in self._produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def release(self) -> None:
        for rec in self.records:
            rec.saved = None
        self.consumed = True

    def _append(self, rec: _Record) -> None:
        self.records.append(rec)
        self._produced.add(id(rec.output))


class _State:
    def __init__(self):
        self.tapes: list[Tape | None] = []
        self.capture: list[dict[int, Tensor]] = []


_STATE = _State()


def current_tape() -> Tape | None:
    return _STATE.tapes[-1] if _STATE.tapes else None


@contextmanager
def no_grad():
    """Suspend recording; ops run eagerly and return untracked tensors."""
    _STATE.tapes.append(None)
    try:
        yield
    finally:
        _STATE.tapes.pop()


@contextmanager
def _capturing():
    # Untracked execution that remembers every tracked tensor read by an op.
    found: dict[int, Tensor] = {}
    _STATE.tapes.append(None)
    _STATE.capture.append(found)
    try:
        yield found
    finally:
        _STATE.capture.pop()
        _STATE.tapes.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _emit(op: str, inputs: tuple[Tensor, ...], value: np.ndarray,
          saved: tuple, vjp: GradFn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(op, f"input shapes {[t.shape for t in inputs]}")
    out = Tensor._wrap(value)
    tracked = [t for t in inputs if t.requires_grad]
    if not tracked:
        return out
    if _STATE.capture:
        found = _STATE.capture[-1]
        for t in tracked:
            found.setdefault(id(t), t)
    tape = current_tape()
    if tape is None:
        return out
    out.requires_grad = True
    tape._append(_Record(op, inputs, out, saved, vjp))
    return out


def _compute(op: str, shapes, fn):
    with np.errstate(all="ignore"):
        try:
            return fn()
        except ValueError as exc:
            raise ShapeError(op, shapes, str(exc)) from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def negate(a) -> Tensor:
    a = as_tensor(a)
    return _emit("negate", (a,), -a.data, (), lambda g, s: (-g,))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    value = _compute("add", (sa, sb), lambda: a.data + b.data)
    return _emit("add", (a, b), value, (),
                 lambda g, s: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    value = _compute("subtract", (sa, sb), lambda: a.data - b.data)
    return _emit("subtract", (a, b), value, (),
                 lambda g, s: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    value = _compute("multiply", (sa, sb), lambda: a.data * b.data)

    def vjp(g, s):
        av, bv = s
        return _unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)

    return _emit("multiply", (a, b), value, (a.data, b.data), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, (), lambda g, s: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product for operands of rank 1 or 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul", (a.shape, b.shape), "operands must be rank 1 or 2")
    value = _compute("matmul", (a.shape, b.shape), lambda: a.data @ b.data)

    def vjp(g, s):
        av, bv = s
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _emit("matmul", (a, b), value, (a.data, b.data), vjp)


def affine(x, W, b=None) -> Tensor:
    """``W x + b`` applied to the last axis of ``x`` (rows of a batch)."""
    x, W = as_tensor(x), as_tensor(W)
    shapes = (x.shape, W.shape) + ((as_tensor(b).shape,) if b is not None else ())
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError("affine", shapes)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError("affine", shapes, "bias must match output width")
    value = _compute("affine", shapes, lambda: x.data @ W.data.T)
    if b is not None:
        value = value + b.data

    def vjp(g, s):
        xv, Wv = s
        gx = g @ Wv
        gW = np.outer(g, xv) if xv.ndim == 1 else g.T @ xv
        if b is None:
            return gx, gW
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return _emit("affine", inputs, value, (x.data, W.data), vjp)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g, s):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis)), (), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else a.shape[axis]

    def vjp(g, s):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", (a,), np.asarray(a.data.mean(axis=axis)), (), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", (a,), a.data * a.data, (a.data,),
                 lambda g, s: (2.0 * s[0] * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    value = _compute("sqrt", (a.shape,), lambda: np.sqrt(a.data))
    return _emit("sqrt", (a,), value, (value,), lambda g, s: (g / (2.0 * s[0]),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = _compute("exp", (a.shape,), lambda: np.exp(a.data))
    return _emit("exp", (a,), value, (value,), lambda g, s: (g * s[0],))


def log(a) -> Tensor:
    a = as_tensor(a)
    value = _compute("log", (a.shape,), lambda: np.log(a.data))
    return _emit("log", (a,), value, (a.data,), lambda g, s: (g / s[0],))


def _stable_logistic(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic(a) -> Tensor:
    a = as_tensor(a)
    value = _stable_logistic(a.data)
    return _emit("logistic", (a,), value, (value,),
                 lambda g, s: (g * s[0] * (1.0 - s[0]),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sin", (a,), np.sin(a.data), (a.data,), lambda g, s: (g * np.cos(s[0]),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _emit("cos", (a,), np.cos(a.data), (a.data,), lambda g, s: (-g * np.sin(s[0]),))


SMOOTH_ABS_DELTA = 1e-6


def smooth_abs(a, delta: float = SMOOTH_ABS_DELTA) -> Tensor:
    """``sqrt(v**2 + delta)``: an everywhere-differentiable ``|v|``."""
    a = as_tensor(a)
    value = np.sqrt(a.data * a.data + delta)
    return _emit("smooth_abs", (a,), value, (a.data, value),
                 lambda g, s: (g * s[0] / s[1],))


def concatenate(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concatenate needs at least one tensor")
    value = _compute("concatenate", [t.shape for t in ts],
                     lambda: np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g, s):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concatenate", ts, value, (), vjp)


def slice_(a, index) -> Tensor:
    """Basic (view) indexing: integers, slices, Ellipsis."""
    a = as_tensor(a)
    idx = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in idx):
        raise ContractError("slice supports only integers, slices and Ellipsis")
    try:
        value = a.data[index].copy()
    except IndexError as exc:
        raise ShapeError("slice", (a.shape,), str(exc)) from None
    shape = a.shape

    def vjp(g, s):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice", (a,), value, (), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    value = _compute("reshape", (src, tuple(shape)), lambda: a.data.reshape(shape))
    return _emit("reshape", (a,), value, (), lambda g, s: (g.reshape(src),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient passes only where ``lo <= a <= hi``."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", (a,), np.clip(a.data, lo, hi), (inside,),
                 lambda g, s: (g * s[0],))


def silu(a) -> Tensor:
    """``a * logistic(a)``, built from primitives."""
    return multiply(a, logistic(a))
