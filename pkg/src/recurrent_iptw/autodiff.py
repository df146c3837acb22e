"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` is created per training step. Parameters and constants are
registered on it, every op appends a node, and :func:`backward` walks the
nodes in reverse to produce gradients for the registered parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives incompatible input shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """Raised when an op is applied outside its domain (e.g. log of 0)."""


class Tensor:
    """A value on a tape. The wrapped array is never mutated after creation."""

    __slots__ = ("value", "tape", "name", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, value: np.ndarray, tape: "Tape", name: str | None = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.name = name
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered op records plus a parameter registry."""

    def __init__(self) -> None:
        self._values: list[Tensor] = []
        self._nodes: dict[int, _Node] = {}
        self.params: dict[str, Tensor] = {}

    def _push(self, value: np.ndarray, name: str | None = None) -> Tensor:
        t = Tensor(value, self, name, len(self._values))
        self._values.append(t)
        return t

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = self._push(np.array(value, dtype=np.float64), name)
        self.params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return self._push(np.asarray(value, dtype=np.float64))

    def record(self, value: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
        out = self._push(value)
        self._nodes[out.index] = _Node(tuple(p.index for p in parents), vjp)
        return out

    def __len__(self) -> int:
        return len(self._values)


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one input must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape("multiply", a, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b) -> Tensor:
    """2-D by 2-D (or 1-D vector) matrix product."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError("matrix-multiply", av.shape, bv.shape)

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return tape.record(av @ bv, (a, b), vjp)


def where(cond, a, b) -> Tensor:
    """Elementwise select: ``a`` where ``cond`` is true, else ``b``."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    mask = np.asarray(cond, dtype=bool)
    try:
        out_shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError("elementwise-select", mask.shape, a.shape, b.shape) from None
    mask = np.broadcast_to(mask, out_shape)
    sa, sb = a.shape, b.shape
    return tape.record(np.where(mask, a.value, b.value), (a, b),
                       lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                                  _unbroadcast(np.where(mask, 0.0, g), sb)))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ShapeError("concatenate", detail="no inputs")
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concatenate", *(x.shape for x in xs)) from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tape.record(value, xs, lambda g: np.split(g, sizes, axis=axis))


# --- elementwise unary -----------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(np.asarray(x.value, dtype=np.float64))
    return x.tape.record(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without cancellation for large |x|."""
    z = x.value
    value = -np.logaddexp(0.0, -z)
    s = _sigmoid(-z)
    return x.tape.record(value, (x,), lambda g: (g * s,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.value)
    return x.tape.record(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.value)
    return x.tape.record(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    v = x.value
    if np.any(v <= 0):
        raise DomainError(f"log: non-positive input (min {v.min()!r})")
    return x.tape.record(np.log(v), (x,), lambda g: (g / v,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return x.tape.record(s, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return x.tape.record(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# --- reductions --------------------------------------------------------------

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    value = np.sum(x.value, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape.record(np.asarray(value, dtype=np.float64), (x,), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# --- backward ----------------------------------------------------------------

def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter on its tape.

    Parameters the loss does not depend on get a zero array.
    """
    if loss.value.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for idx in range(loss.index, -1, -1):
        node = tape._nodes.get(idx)
        if node is None:
            continue  # leaf: parameter or constant, gradient stays in the map
        g = grads.pop(idx, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            grads[parent] = grads[parent] + pg if parent in grads else pg
    return {
        name: np.asarray(grads[t.index], dtype=np.float64).reshape(t.shape) if t.index in grads
        else np.zeros_like(t.value)
        for name, t in tape.params.items()
    }


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


# --- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns fresh parameter arrays."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"adam_step: no gradient for {missing}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        out[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out, state


# --- gradient checking -------------------------------------------------------

def grad_check(fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` receives a dict of parameter tensors on a fresh tape and returns a
    scalar loss. The error for each named parameter is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` with L2 norms
    taken over the array; the max over parameters is returned.
    """
    def run(values):
        tape = Tape()
        return fn({k: tape.param(k, v) for k, v in values.items()})

    analytic = backward(run(params))
    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        numeric = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            hi, lo = base.copy(), base.copy()
            hi[i] += step
            lo[i] -= step
            f_hi = float(run({**params, name: hi}).value)
            f_lo = float(run({**params, name: lo}).value)
            numeric[i] = (f_hi - f_lo) / (2.0 * step)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst
