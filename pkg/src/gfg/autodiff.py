"""Reverse-mode automatic differentiation on a per-evaluation tape.

A :class:`Tape` is an append-only list of primitive records. Each record keeps
the indices of its inputs and the local partial derivative with respect to each
input, so records only ever reference earlier records. Values may be Python
floats or numpy arrays; all primitives are elementwise (with numpy
broadcasting) except :func:`sum` and :func:`logsumexp`.

Plain floats and arrays are treated as constants: an operation whose inputs are
all constants returns a constant and records nothing.

Example::

    tape = Tape()
    x = tape.variable(3.0)
    y = x * x
    grads = backward(y)
    grads[x]  # 6.0
"""

from __future__ import annotations

import numpy as np

from gfg.errors import DomainError

__all__ = [
    "Tape",
    "Scalar",
    "Gradient",
    "backward",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "pow",
    "tanh",
    "sigmoid",
    "softplus",
    "sum",
    "add_n",
    "logsumexp",
    "stop_gradient",
]


class Tape:
    """Append-only record of primitive operations."""

    __slots__ = ("_parents", "_partials", "_shapes", "leaves")

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._partials: list[tuple] = []
        self._shapes: list[tuple[int, ...]] = []
        self.leaves: dict[str, Scalar] = {}

    def __len__(self):
        return len(self._parents)

    def variable(self, value, name: str | None = None) -> "Scalar":
        """Create an input (leaf) on this tape, optionally registered under ``name``."""
        value = _as_value(value)
        out = self._record(value, (), ())
        if name is not None:
            self.leaves[name] = out
        return out

    def _record(self, value, parents, partials) -> "Scalar":
        self._parents.append(parents)
        self._partials.append(partials)
        self._shapes.append(np.shape(value))
        return Scalar(value, self, len(self._parents) - 1)

    def records(self):
        """Yield ``(input indices, local partials)`` for every record in order."""
        return zip(self._parents, self._partials)


class Scalar:
    """A value that lives on a tape.

    ``value`` is a float or an ndarray; arrays are treated elementwise, which
    is how Monte-Carlo batches are carried through an objective.
    """

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"Scalar({self.value!r}, index={self.index})"

    def __float__(self):
        return float(self.value)

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, other):
        return pow(self, other)

    def __rpow__(self, other):
        return pow(other, self)


class Gradient(dict):
    """Map from tape index to gradient; absent entries are zero.

    Lookups accept either an integer tape index or the :class:`Scalar` itself.
    """

    def __getitem__(self, key):
        if isinstance(key, Scalar):
            key = key.index
        return super().get(key, 0.0)

    def __contains__(self, key):
        if isinstance(key, Scalar):
            key = key.index
        return super().__contains__(key)


def _as_value(x):
    if isinstance(x, np.ndarray):
        return x.astype(float, copy=False)
    if isinstance(x, (list, tuple)):
        return np.asarray(x, dtype=float)
    return float(x)


def value_of(x):
    """Strip the tape from ``x``; constants are returned unchanged."""
    return x.value if isinstance(x, Scalar) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Scalar):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _emit(value, inputs, partials):
    """Record ``value`` with the taped subset of ``inputs``."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents = []
    kept = []
    for x, d in zip(inputs, partials):
        if isinstance(x, Scalar):
            parents.append(x.index)
            kept.append(d)
    return tape._record(value, tuple(parents), tuple(kept))


def add(a, b):
    return _emit(value_of(a) + value_of(b), (a, b), (1.0, 1.0))


def sub(a, b):
    return _emit(value_of(a) - value_of(b), (a, b), (1.0, -1.0))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(av * bv, (a, b), (bv, av))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    if np.any(np.asarray(bv) == 0):
        raise DomainError("division by zero")
    inv = 1.0 / bv
    out = av * inv
    return _emit(out, (a, b), (inv, -out * inv))


def neg(a):
    return _emit(-value_of(a), (a,), (-1.0,))


def exp(a):
    out = np.exp(value_of(a))
    return _emit(out, (a,), (out,))


def log(a):
    av = value_of(a)
    if np.any(np.asarray(av) <= 0):
        raise DomainError(f"log of non-positive value {av!r}")
    return _emit(np.log(av), (a,), (1.0 / av,))


def pow(a, b):
    av, bv = value_of(a), value_of(b)
    base = np.asarray(av)
    if isinstance(b, Scalar):
        if np.any(base <= 0):
            raise DomainError("pow with a taped exponent needs a positive base")
        out = av**bv
        return _emit(out, (a, b), (bv * av ** (bv - 1.0), out * np.log(av)))
    integral = np.all(np.asarray(bv) == np.round(bv))
    if np.any(base < 0) and not integral:
        raise DomainError("fractional power of a negative base")
    if np.any(base == 0) and np.any(np.asarray(bv) < 0):
        raise DomainError("negative power of zero")
    out = av**bv
    return _emit(out, (a,), (bv * av ** (bv - 1.0),))


def tanh(a):
    out = np.tanh(value_of(a))
    return _emit(out, (a,), (1.0 - out * out,))


def sigmoid(a):
    av = value_of(a)
    out = np.exp(-np.logaddexp(0.0, -av))
    return _emit(out, (a,), (out * (1.0 - out),))


def softplus(a):
    """``log(1 + exp(a))`` computed without overflow."""
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    return _emit(out, (a,), (np.exp(-np.logaddexp(0.0, -av)),))


def sum(a):
    """Reduce an array-valued input to a scalar."""
    av = value_of(a)
    out = float(np.sum(av))
    return _emit(out, (a,), (np.ones_like(av, dtype=float) if np.ndim(av) else 1.0,))


def add_n(xs):
    """Sum of a sequence of values in one record."""
    xs = list(xs)
    if not xs:
        return 0.0
    total = value_of(xs[0])
    for x in xs[1:]:
        total = total + value_of(x)
    return _emit(total, xs, (1.0,) * len(xs))


def logsumexp(xs):
    """``log(sum(exp(x) for x in xs))`` over a sequence of elementwise values."""
    xs = list(xs)
    vals = np.stack([np.asarray(value_of(x), dtype=float) for x in xs]) if xs else None
    if vals is None:
        raise DomainError("logsumexp of an empty sequence")
    top = np.max(vals, axis=0)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    shifted = np.exp(vals - safe_top)
    total = np.sum(shifted, axis=0)
    out = np.log(total) + safe_top
    weights = shifted / total
    if np.ndim(out) == 0:
        out = float(out)
        partials = tuple(float(w) for w in weights)
    else:
        partials = tuple(weights)
    return _emit(out, xs, partials)


def stop_gradient(x):
    """Identity on values; the backward pass sends nothing into ``x``."""
    if not isinstance(x, Scalar):
        return x
    return x.tape._record(x.value, (), ())


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    if shape == ():
        return float(g)
    return g


def backward(output: Scalar) -> Gradient:
    """Exact reverse-mode gradients of ``output`` w.r.t. every record on its tape.

    An array-valued output is differentiated as the sum of its elements.
    """
    if not isinstance(output, Scalar):
        raise TypeError("backward needs a taped Scalar")
    tape = output.tape
    parents, partials, shapes = tape._parents, tape._partials, tape._shapes
    adj: list = [None] * (output.index + 1)
    v = output.value
    adj[output.index] = np.ones_like(v, dtype=float) if np.ndim(v) else 1.0
    for i in range(output.index, -1, -1):
        g = adj[i]
        if g is None or not parents[i]:
            continue
        for p, d in zip(parents[i], partials[i]):
            c = g * d
            shape = shapes[p]
            if np.shape(c) != shape:
                c = _unbroadcast(c, shape)
            prev = adj[p]
            adj[p] = c if prev is None else prev + c
    return Gradient((i, g) for i, g in enumerate(adj) if g is not None)


def isfinite(x) -> bool:
    return bool(np.all(np.isfinite(value_of(x))))

