"""Dense float64 values with a reverse-mode differentiation tape.

Every traced value is a numpy float64 array wrapped in a :class:`Var`.
Applying a primitive appends one record to the owning :class:`Tape`; the
records are already in topological order (an input must exist before the
op that consumes it runs), so :func:`backward` is a single reverse sweep
that visits each record exactly once.

The primitive surface is intentionally small: exactly what the denoiser,
the training loss and the constraint-energy gradient need. Broadcasting
is restricted to leading-dimension batching (one operand's shape must be
a trailing suffix of the other's); anything fancier has to be written as
an explicit reshape or a matmul against a constant.

Traced values are treated as immutable. `leaf` and `constant` alias the
arrays they are given, so callers must not mutate those buffers while
the tape is still in use.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

# Smoothing inside the traced euclidean norm. Keeps value and gradient
# consistent and finite at coincident points; raw norms for constraint
# checking live outside the tape.
NORM_EPS = 1e-10


def _assert_finite(name: str, arr: np.ndarray) -> None:
    # A non-finite element always contaminates the sum, so one reduction
    # guards the whole array; the exact check only re-runs on the rare
    # non-finite sum (which can also be a huge-but-finite overflow).
    if not math.isfinite(float(arr.sum())) and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: produced non-finite values")


class ShapeError(ValueError):
    """Operand shapes incompatible with a primitive."""


class Var:
    """A float64 array recorded on a tape."""

    __slots__ = ("tape", "vid", "value")

    def __init__(self, tape: "Tape", vid: int, value: np.ndarray):
        self.tape = tape
        self.vid = vid
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ValueError("operands recorded on different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, self._coerce(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def exp(self):
        return exp(self)

    def tanh(self):
        return tanh(self)

    def norm(self):
        return norm(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Var(vid={self.vid}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive applications plus the values they made.

    One tape per differentiation task; a tape must stay on the thread
    that built it. Records are (output id, input ids, vjp) where ``vjp``
    maps the output adjoint to one adjoint array per input.
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._next_id = 0
        self._leaf_ids: set[int] = set()

    def _make(self, value: np.ndarray) -> Var:
        vid = self._next_id
        self._next_id += 1
        return Var(self, vid, value)

    def leaf(self, value) -> Var:
        """Register a differentiable input."""
        arr = np.asarray(value, dtype=np.float64)
        _assert_finite("leaf", arr)
        v = self._make(arr)
        self._leaf_ids.add(v.vid)
        return v

    def constant(self, value) -> Var:
        """Register a value that never receives a gradient."""
        arr = np.asarray(value, dtype=np.float64)
        _assert_finite("constant", arr)
        return self._make(arr)

    def _record(self, name: str, out_value: np.ndarray, inputs: Sequence[Var], vjp: Callable) -> Var:
        _assert_finite(name, out_value)
        out = self._make(out_value)
        self._records.append((out.vid, tuple(v.vid for v in inputs), vjp))
        return out


_PRIMITIVES: dict[str, Callable] = {}


def _primitive(name: str):
    def register(fn):
        _PRIMITIVES[name] = fn
        return fn

    return register


def forward_primitive(op: str, *inputs: Var, **opts) -> Var:
    """Apply a named primitive to traced inputs.

    Thin dispatch layer over the module-level primitive functions; the
    operator sugar on :class:`Var` routes through the same functions.
    """
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **opts)


def backward(tape: Tape, output: Var, seed: float = 1.0) -> dict[int, np.ndarray]:
    """Accumulate adjoints of a scalar output for every reached value id.

    Leaves that the output does not depend on are simply absent from the
    returned map; read them through :func:`gradient`, which fills zeros.
    """
    if output.value.shape != ():
        raise ShapeError(
            f"backward: output must be a scalar, got shape {output.value.shape}"
        )
    adjoints: dict[int, np.ndarray] = {output.vid: np.asarray(float(seed))}
    for out_id, in_ids, vjp in reversed(tape._records):
        g = adjoints.get(out_id)
        if g is None:
            continue
        for vid, contrib in zip(in_ids, vjp(g)):
            if contrib is None:
                continue
            acc = adjoints.get(vid)
            adjoints[vid] = contrib if acc is None else acc + contrib
    return adjoints


def gradient(adjoints: dict[int, np.ndarray], var: Var) -> np.ndarray:
    """Adjoint of one value; zeros when the output never touched it."""
    g = adjoints.get(var.vid)
    return np.zeros_like(var.value) if g is None else np.asarray(g, dtype=np.float64)


def _same_tape(name: str, *vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError(f"{name}: operands recorded on different tapes")
    return tape


def _suffix_broadcast(name: str, x: Var, y: Var) -> tuple[int, ...]:
    sx, sy = x.value.shape, y.value.shape
    if sx == sy:
        return sx
    if len(sy) <= len(sx) and sx[len(sx) - len(sy):] == sy:
        return sx
    if len(sx) <= len(sy) and sy[len(sy) - len(sx):] == sx:
        return sy
    raise ShapeError(f"{name}: operand shapes {sx} and {sy} are incompatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


@_primitive("add")
def add(x: Var, y: Var) -> Var:
    tape = _same_tape("add", x, y)
    _suffix_broadcast("add", x, y)

    def vjp(g):
        return (_unbroadcast(g, x.value.shape), _unbroadcast(g, y.value.shape))

    return tape._record("add", x.value + y.value, (x, y), vjp)


@_primitive("sub")
def sub(x: Var, y: Var) -> Var:
    tape = _same_tape("sub", x, y)
    _suffix_broadcast("sub", x, y)

    def vjp(g):
        return (_unbroadcast(g, x.value.shape), -_unbroadcast(g, y.value.shape))

    return tape._record("sub", x.value - y.value, (x, y), vjp)


@_primitive("mul")
def mul(x: Var, y: Var) -> Var:
    tape = _same_tape("mul", x, y)
    _suffix_broadcast("mul", x, y)
    xv, yv = x.value, y.value

    def vjp(g):
        return (_unbroadcast(g * yv, xv.shape), _unbroadcast(g * xv, yv.shape))

    return tape._record("mul", xv * yv, (x, y), vjp)


@_primitive("div")
def div(x: Var, y: Var) -> Var:
    tape = _same_tape("div", x, y)
    _suffix_broadcast("div", x, y)
    xv, yv = x.value, y.value

    def vjp(g):
        return (
            _unbroadcast(g / yv, xv.shape),
            _unbroadcast(-g * xv / (yv * yv), yv.shape),
        )

    return tape._record("div", xv / yv, (x, y), vjp)


@_primitive("scale")
def scale(x: Var, factor: float) -> Var:
    def vjp(g):
        return (g * factor,)

    return x.tape._record("scale", x.value * factor, (x,), vjp)


@_primitive("matmul")
def matmul(a: Var, b: Var) -> Var:
    tape = _same_tape("matmul", a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul: operand shapes {av.shape} and {bv.shape} are incompatible"
        )

    def vjp(g):
        if bv.ndim == 1:
            return (np.outer(g, bv), av.T @ g)
        return (g @ bv.T, av.T @ g)

    return tape._record("matmul", av @ bv, (a, b), vjp)


@_primitive("sum")
def reduce_sum(x: Var, axis=None, keepdims: bool = False) -> Var:
    xv = x.value
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xv.shape).copy(),)

    return x.tape._record("sum", np.asarray(out), (x,), vjp)


@_primitive("broadcast")
def broadcast(x: Var, leading: tuple[int, ...]) -> Var:
    """Tile a value across new leading axes."""
    leading = tuple(int(d) for d in leading)
    out_shape = leading + x.value.shape

    def vjp(g):
        return (g.sum(axis=tuple(range(len(leading)))),)

    return x.tape._record(
        "broadcast", np.broadcast_to(x.value, out_shape).copy(), (x,), vjp
    )


@_primitive("exp")
def exp(x: Var) -> Var:
    out = np.exp(x.value)

    def vjp(g):
        return (g * out,)

    return x.tape._record("exp", out, (x,), vjp)


@_primitive("tanh")
def tanh(x: Var) -> Var:
    out = np.tanh(x.value)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return x.tape._record("tanh", out, (x,), vjp)


@_primitive("norm")
def norm(x: Var) -> Var:
    """Euclidean norm along the last axis, smoothed near zero.

    Computes sqrt(|x|^2 + NORM_EPS); the smoothing is part of the traced
    function, so analytic and finite-difference gradients agree and the
    gradient at the origin is exactly zero rather than NaN.
    """
    xv = x.value
    if xv.ndim < 1:
        raise ShapeError("norm: input must have at least one axis")
    out = np.sqrt((xv * xv).sum(axis=-1) + NORM_EPS)

    def vjp(g):
        return ((g / out)[..., None] * xv,)

    return x.tape._record("norm", out, (x,), vjp)


@_primitive("concat")
def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    if not parts:
        raise ShapeError("concat: needs at least one operand")
    tape = _same_tape("concat", *parts)
    values = [p.value for p in parts]
    ref = values[0].shape
    for v in values[1:]:
        if v.ndim != len(ref):
            raise ShapeError(
                f"concat: operand shapes {ref} and {v.shape} are incompatible"
            )
    out = np.concatenate(values, axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [v.shape[ax] for v in values]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=ax))

    return tape._record("concat", out, tuple(parts), vjp)


@_primitive("gather")
def gather(x: Var, index) -> Var:
    """Select rows (axis 0) by an integer index array."""
    idx = np.asarray(index, dtype=np.int64)
    xv = x.value
    if idx.ndim != 1:
        raise ShapeError("gather: index must be one-dimensional")
    if xv.ndim < 1:
        raise ShapeError("gather: input must have at least one axis")
    if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[0]):
        raise ShapeError(
            f"gather: index range [{idx.min()}, {idx.max()}] outside axis of length {xv.shape[0]}"
        )

    def vjp(g):
        z = np.zeros_like(xv)
        np.add.at(z, idx, g)
        return (z,)

    return x.tape._record("gather", xv[idx], (x,), vjp)


@_primitive("reshape")
def reshape(x: Var, shape) -> Var:
    shape = tuple(int(d) for d in shape)
    xv = x.value

    def vjp(g):
        return (g.reshape(xv.shape),)

    return x.tape._record("reshape", xv.reshape(shape), (x,), vjp)


def square(x: Var) -> Var:
    return mul(x, x)


def mean(x: Var) -> Var:
    return scale(reduce_sum(x), 1.0 / x.value.size)
