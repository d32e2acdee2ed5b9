"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every primitive applied to a tape-attached tensor.
Parameters enter a tape through :meth:`Tape.watch`; :func:`backward` walks the
records once in reverse and returns a gradient for every watched parameter.

    >>> tape = Tape()
    >>> w = Parameter("w", np.array([1.0, 2.0, 3.0]))
    >>> x = tape.watch(w)
    >>> backward(tape, (x * x).sum())["w"]
    array([2., 4., 6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Sequence

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    """Input shapes do not fit a primitive's signature."""


class DomainError(ValueError):
    """Input values fall outside a primitive's domain."""


class Tensor:
    """A float64 array, optionally attached to a :class:`Tape` node."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def attached(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.attached else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar over apply_primitive
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        return apply_primitive("mul", [other, self])

    def __neg__(self):
        return apply_primitive("negate", [self])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply_primitive("matmul", [other, self])

    def exp(self):
        return apply_primitive("exp", [self])

    def log(self):
        return apply_primitive("log", [self])

    def square(self):
        return apply_primitive("square", [self])

    def sum(self, axes=None):
        return apply_primitive("sum", [self], axes=axes)

    def mean(self, axes=None):
        return apply_primitive("mean", [self], axes=axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Parameter:
    """A named trainable array; ``name`` is a slash path unique within a model pair."""

    name: str
    data: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.data = np.array(self.data, dtype=np.float64)

    @property
    def tensor(self) -> Tensor:
        return Tensor(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


class Record(NamedTuple):
    name: str
    inputs: tuple[int | None, ...]
    output: int
    saved: tuple


class Tape:
    """Append-only record of primitive applications.

    Node ids are issued in increasing order, so records are topologically
    sorted by construction.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.leaves: dict[str, tuple[int, Parameter]] = {}
        self._next = 0
        self._consumed: set[int] = set()

    def _new_node(self) -> int:
        node = self._next
        self._next += 1
        return node

    def watch(self, param: Parameter) -> Tensor:
        """Attach ``param`` as a leaf; repeated calls return the same node."""
        hit = self.leaves.get(param.name)
        if hit is not None:
            node, owner = hit
            if owner is not param:
                raise ValueError(f"two parameters share the name {param.name!r}")
            return Tensor(param.data, self, node)
        node = self._new_node()
        self.leaves[param.name] = (node, param)
        return Tensor(param.data, self, node)

    def __len__(self) -> int:
        return len(self.records)


def watch(tape: Tape | None, param: Parameter) -> Tensor:
    """Tape-attached view of ``param``, or a detached one when ``tape`` is None."""
    return Tensor(param.data) if tape is None else tape.watch(param)


# -- primitives --------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _fwd_matmul(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, None


def _bwd_matmul(g, xs, out, saved, attrs):
    a, b = xs
    return g @ b.T, a.T @ g


def _fwd_add(xs, attrs):
    _broadcast_shape("add", *xs)
    return xs[0] + xs[1], None


def _bwd_add(g, xs, out, saved, attrs):
    return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)


def _fwd_sub(xs, attrs):
    _broadcast_shape("sub", *xs)
    return xs[0] - xs[1], None


def _bwd_sub(g, xs, out, saved, attrs):
    return _unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)


def _fwd_mul(xs, attrs):
    _broadcast_shape("mul", *xs)
    return xs[0] * xs[1], None


def _bwd_mul(g, xs, out, saved, attrs):
    a, b = xs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fwd_log(xs, attrs):
    (x,) = xs
    if np.any(x <= 0):
        raise DomainError(f"log: input has {int(np.sum(x <= 0))} non-positive entries")
    return np.log(x), None


def _fwd_sum(xs, attrs):
    (x,) = xs
    axes = _norm_axes(attrs.get("axes"), x.ndim)
    return x.sum(axis=axes), axes


def _bwd_sum(g, xs, out, axes, attrs):
    (x,) = xs
    return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)


def _fwd_mean(xs, attrs):
    (x,) = xs
    axes = _norm_axes(attrs.get("axes"), x.ndim)
    return x.mean(axis=axes), axes


def _bwd_mean(g, xs, out, axes, attrs):
    (x,) = xs
    count = int(np.prod([x.shape[a] for a in axes]))
    return (np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).copy(),)


def _fwd_concat(xs, attrs):
    axis = attrs.get("axis", -1)
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} along axis {axis}") from None
    return out, axis


def _bwd_concat(g, xs, out, axis, attrs):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _fwd_slice(xs, attrs):
    (x,) = xs
    axis, start, stop = attrs.get("axis", -1), attrs["start"], attrs["stop"]
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) outside axis of length {n} in {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)], tuple(index)


def _bwd_slice(g, xs, out, index, attrs):
    gx = np.zeros_like(xs[0])
    gx[index] = g
    return (gx,)


def _fwd_clip(xs, attrs):
    return np.clip(xs[0], attrs["lo"], attrs["hi"]), None


def _bwd_clip(g, xs, out, saved, attrs):
    (x,) = xs
    inside = (x >= attrs["lo"]) & (x <= attrs["hi"])
    return (np.where(inside, g, 0.0),)


def _unary(fwd, bwd):
    return (lambda xs, attrs: (fwd(xs[0]), None), bwd)


class Primitive(NamedTuple):
    arity: int | None  # None = variadic
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {
    "matmul": Primitive(2, _fwd_matmul, _bwd_matmul),
    "add": Primitive(2, _fwd_add, _bwd_add),
    "sub": Primitive(2, _fwd_sub, _bwd_sub),
    "mul": Primitive(2, _fwd_mul, _bwd_mul),
    "negate": Primitive(1, *_unary(np.negative, lambda g, xs, out, s, a: (-g,))),
    "exp": Primitive(1, *_unary(np.exp, lambda g, xs, out, s, a: (g * out,))),
    "log": Primitive(1, _fwd_log, lambda g, xs, out, s, a: (g / xs[0],)),
    "sigmoid": Primitive(1, *_unary(K.sigmoid, lambda g, xs, out, s, a: (K.sigmoid_backward(out, g),))),
    "softplus": Primitive(1, *_unary(K.softplus, lambda g, xs, out, s, a: (K.softplus_backward(xs[0], g),))),
    "tanh": Primitive(1, *_unary(np.tanh, lambda g, xs, out, s, a: (K.tanh_backward(out, g),))),
    # subgradient at exactly 0 is 0
    "relu": Primitive(1, *_unary(K.relu, lambda g, xs, out, s, a: (K.relu_backward(xs[0], g),))),
    "square": Primitive(1, *_unary(np.square, lambda g, xs, out, s, a: (2.0 * xs[0] * g,))),
    "sum": Primitive(1, _fwd_sum, _bwd_sum),
    "mean": Primitive(1, _fwd_mean, _bwd_mean),
    "concat": Primitive(None, _fwd_concat, _bwd_concat),
    "slice": Primitive(1, _fwd_slice, _bwd_slice),
    "clip": Primitive(1, _fwd_clip, _bwd_clip),
}


def apply_primitive(name: str, inputs: Sequence[Any], **attrs) -> Tensor:
    """Evaluate primitive ``name`` on ``inputs``; record it if any input is attached.

    ``attrs`` carries static arguments: ``axes`` for sum/mean, ``axis`` for
    concat, ``axis``/``start``/``stop`` for slice and ``lo``/``hi`` for clip.
    """
    prim = PRIMITIVES.get(name)
    if prim is None:
        raise KeyError(f"unknown primitive {name!r}")
    tensors = [as_tensor(x) for x in inputs]
    if prim.arity is not None and len(tensors) != prim.arity:
        raise ShapeError(f"{name}: expected {prim.arity} inputs, got {len(tensors)}")
    if prim.arity is None and not tensors:
        raise ShapeError(f"{name}: needs at least one input")
    arrays = [t.data for t in tensors]
    out, saved = prim.forward(arrays, attrs)
    out = np.asarray(out, dtype=np.float64)

    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{name}: inputs are attached to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    node = tape._new_node()
    tape.records.append(
        Record(name, tuple(t.node for t in tensors), node, (arrays, out, saved, attrs))
    )
    return Tensor(out, tape, node)


def backward(tape: Tape, root: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every watched trainable parameter.

    Parameters the root does not depend on get zero arrays. Each root may be
    differentiated once.
    """
    if root.tape is None:
        raise ValueError("backward: root is not attached to a tape")
    if root.tape is not tape:
        raise ValueError("backward: root belongs to a different tape")
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.node in tape._consumed:
        raise RuntimeError("backward: this root has already been differentiated")
    tape._consumed.add(root.node)

    grads: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
    for rec in reversed(tape.records):
        if rec.output > root.node:
            continue
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        arrays, out, saved, attrs = rec.saved
        parts = PRIMITIVES[rec.name].backward(g, arrays, out, saved, attrs)
        for node, part in zip(rec.inputs, parts):
            if node is None:
                continue
            if node in grads:
                grads[node] = grads[node] + part
            else:
                grads[node] = part

    result = {}
    for name, (node, param) in tape.leaves.items():
        if not param.trainable:
            continue
        g = grads.get(node)
        result[name] = np.zeros_like(param.data) if g is None else np.asarray(g).reshape(param.shape)
    return result


# -- finite-difference checking ------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between autodiff and central differences."""

    tol: float
    max_error: dict[str, float] = field(default_factory=dict)
    flagged: dict[str, list[tuple[int, ...]]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not any(self.flagged.values())

    @property
    def worst(self) -> float:
        return max(self.max_error.values(), default=0.0)


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def grad_check(
    f: Callable[[Tape], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare :func:`backward` gradients of ``f`` with central differences.

    ``f`` receives a fresh tape on every call, must obtain parameters through
    :meth:`Tape.watch` and must be deterministic (fixed noise).
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    tape = Tape()
    analytic = backward(tape, f(tape))
    report = GradCheckReport(tol)
    for p in params:
        numeric = np.zeros_like(p.data)
        base = p.data
        for idx in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[idx] = base[idx] + h
            p.data = shifted
            up = f(Tape()).item()
            shifted = base.copy()
            shifted[idx] = base[idx] - h
            p.data = shifted
            down = f(Tape()).item()
            numeric[idx] = (up - down) / (2 * h)
        p.data = base
        err = relative_error(analytic.get(p.name, np.zeros_like(base)), numeric)
        report.max_error[p.name] = float(err.max()) if err.size else 0.0
        report.flagged[p.name] = [tuple(int(i) for i in ix) for ix in np.argwhere(err > tol)]
    return report


# -- functional helpers --------------------------------------------------------


def concat(xs, axis=-1):
    return apply_primitive("concat", list(xs), axis=axis)


def take(x, start, stop, axis=-1):
    return apply_primitive("slice", [x], axis=axis, start=start, stop=stop)


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def softplus(x):
    return apply_primitive("softplus", [x])


def relu(x):
    return apply_primitive("relu", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def square(x):
    return apply_primitive("square", [x])


def clip(x, lo, hi):
    return apply_primitive("clip", [x], lo=lo, hi=hi)


def tsum(x, axes=None):
    return apply_primitive("sum", [x], axes=axes)
