"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of primitives needed by the losses and the fusion encoder
are provided: affine, relu, concat, mean-pool, l2-normalize, dot, exp, log,
the ``[t]_{1+}`` clip gate and a few elementwise/reduction helpers.

Typical use::

    tape = Tape()
    w = tape.param("w", np.ones(3))
    loss = dc.dot(w, w)
    grads = dc.backward(tape)        # {"w": array([2., 2., 2.])}
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12


class DiffcoreError(Exception):
    """Contract violation inside the tape machinery."""


class DegenerateVectorError(DiffcoreError, ValueError):
    """Raised when normalizing a vector whose norm is at or below EPS_NORM."""


class OracleError(DiffcoreError, ArithmeticError):
    """Raised when the finite-difference oracle sees a non-finite value."""


class Tensor:
    """A float64 array recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value, tape: "Tape", name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = tape._register(self)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so every node's inputs always
    precede it. Parameters are named leaves; ``backward`` reports gradients
    for them only.
    """

    def __init__(self):
        self._count = 0
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.params: dict[str, Tensor] = {}
        self.output: Tensor | None = None

    def _register(self, tensor: Tensor) -> int:
        idx = self._count
        self._count += 1
        return idx

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise DiffcoreError(f"parameter {name!r} already on tape")
        t = Tensor(np.array(value, dtype=np.float64), self, name=name)
        self.params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return Tensor(value, self)

    def record(self, value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        """Append a node. ``vjp(g)`` returns one gradient per input."""
        out = Tensor(value, self)
        self.nodes.append((out, tuple(inputs), vjp))
        self.output = out
        return out


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise DiffcoreError("operands live on different tapes")
    if tape is None:
        raise DiffcoreError("at least one operand must be a Tensor")
    return tape


def _lift(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape: Tape, seed: float = 1.0, output: Tensor | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep; returns ``{param name: d output / d param}``.

    Every parameter on the tape gets an entry (zeros when unreachable).
    """
    out = tape.output if output is None else output
    if out is None:
        raise DiffcoreError("tape has no output")
    if out.value.size != 1:
        raise DiffcoreError(f"backward needs a scalar output, got shape {out.shape}")
    grads: dict[int, np.ndarray] = {out.index: np.full(out.shape, float(seed))}
    for node_out, inputs, vjp in reversed(tape.nodes):
        if node_out.index > out.index:
            continue
        g = grads.pop(node_out.index, None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            prev = grads.get(inp.index)
            grads[inp.index] = gi if prev is None else prev + gi
    result = {}
    for name, p in tape.params.items():
        g = grads.get(p.index)
        result[name] = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return result


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``.

    Returns the absolute error when both vectors are identically zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = float(np.max(np.abs(a - n))) if a.size else 0.0
    scale_ = max(float(np.max(np.abs(a))) if a.size else 0.0, float(np.max(np.abs(n))) if n.size else 0.0)
    return err / scale_ if scale_ > 0 else err


# ---------------------------------------------------------------- primitives


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (any leading dims)."""
    tape = _tape_of(x, weight, bias)
    x, weight = _lift(x, tape), _lift(weight, tape)
    xv, wv = x.value, weight.value
    if xv.shape[-1] != wv.shape[0]:
        raise DiffcoreError(f"affine shape mismatch: {xv.shape} @ {wv.shape}")
    out = xv @ wv
    inputs = [x, weight]
    if bias is not None:
        bias = _lift(bias, tape)
        out = out + bias.value
        inputs.append(bias)

    def vjp(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, wv.shape[0]).T @ g.reshape(-1, wv.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, wv.shape[1]).sum(axis=0)

    return tape.record(out, inputs, vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0

    def vjp(g):
        return (g * mask,)

    return x.tape.record(np.where(mask, x.value, 0.0), [x], vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(np.concatenate([x.value for x in xs], axis=axis), xs, vjp)


def mean_pool(x: Tensor, axis: int = 0) -> Tensor:
    n = x.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return x.tape.record(x.value.mean(axis=axis), [x], vjp)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """``x / |x|`` along ``axis``; raises DegenerateVectorError for |x| <= 1e-12."""
    norm = np.sqrt(np.sum(x.value * x.value, axis=axis, keepdims=True))
    if np.any(norm <= EPS_NORM) or not np.all(np.isfinite(norm)):
        raise DegenerateVectorError("cannot normalize a vector with norm <= 1e-12")
    y = x.value / norm

    def vjp(g):
        # (I - y y^T) g / |x|
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return x.tape.record(y, [x], vjp)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Contract the last axes: vector.vector -> scalar, (m,d).(n,d) -> (m,n)."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-1] or av.ndim > 2 or bv.ndim > 2:
        raise DiffcoreError(f"dot shape mismatch: {av.shape} . {bv.shape}")
    out = av @ bv.T

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return g @ bv, np.outer(g, av)
        if bv.ndim == 1:
            return np.outer(g, bv), g @ av
        return g @ bv, g.T @ av

    return tape.record(out, [a, b], vjp)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return x.tape.record(y, [x], lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xv = x.value
    if np.any(xv <= 0):
        raise DiffcoreError("log of a non-positive value")
    return x.tape.record(np.log(xv), [x], lambda g: (g / xv,))


def clip_gate(x: Tensor, threshold: float = 1.0) -> Tensor:
    """``t`` where ``t > threshold`` else 0; subgradient 0 at the threshold."""
    mask = x.value > threshold
    return x.tape.record(np.where(mask, x.value, 0.0), [x], lambda g: (g * mask,))


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, [a, b], lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, [a, b], lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    return tape.record(
        av * bv, [a, b], lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return x.tape.record(x.value * c, [x], lambda g: (g * c,))


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape.record(x.value.sum(axis=axis), [x], vjp)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


def take(x: Tensor, idx) -> Tensor:
    """Numpy-style indexing with a scatter-add gradient."""
    if isinstance(idx, list):
        idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape.record(np.array(x.value[idx], dtype=np.float64), [x], vjp)


def custom(inputs: Sequence[Tensor], value, vjp: Callable) -> Tensor:
    """Record a fused operation with a hand-written vector-Jacobian product."""
    tape = _tape_of(*inputs)
    return tape.record(value, [_lift(x, tape) for x in inputs], vjp)
