"""Dense 64-bit tensors with tape-based reverse-mode differentiation.

A ``Tape`` records every primitive applied to tensors that require
gradients; ``Tape.backward`` replays the records once, in reverse
creation order, which is a valid topological order because the tape is
append-only.  One tape belongs to one thread; tensors themselves are
plain value wrappers and may be shared read-only.

Non-smooth conventions: ``|x|`` uses subgradient 0 at x = 0, LeakyReLU
uses the positive-side slope at 0, and the L2-norm primitive returns a
zero gradient on all-zero slices instead of dividing by zero.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DomainError, ShapeError

_ACTIVE: Optional["Tape"] = None


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """Immutable-by-convention dense array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})"

    # operator sugar; every implementation lives in a module-level primitive
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __rsub__(self, other):
        return subtract(_lift(other), self)

    def __mul__(self, other):
        return multiply(self, _lift(other))

    def __rmul__(self, other):
        return multiply(_lift(other), self)

    def __truediv__(self, other):
        return divide(self, _lift(other))

    def __rtruediv__(self, other):
        return divide(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return negate(self)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return total(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents: tuple, vjp: Optional[Callable]):
        self.parents = parents
        self.vjp = vjp


class Gradients:
    """Gradient lookup returned by ``Tape.backward``.

    Leaves that were never reached hold a zero gradient, per contract.
    """

    def __init__(self, tape: "Tape", grads: dict):
        self._tape = tape
        self._grads = grads

    def of(self, tensor: Tensor) -> np.ndarray:
        if tensor._tape is self._tape and tensor.node_id in self._grads:
            return self._grads[tensor.node_id]
        return np.zeros_like(tensor.data)


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev

    def __len__(self) -> int:
        return len(self._nodes)

    def _register_leaf(self, tensor: Tensor) -> int:
        if self._consumed:
            raise ContractError("cannot record onto a consumed tape")
        self._nodes.append(_Node((), None))
        tensor.node_id = len(self._nodes) - 1
        tensor._tape = self
        return tensor.node_id

    def _record(self, out: Tensor, parents: tuple, vjp: Callable) -> None:
        if self._consumed:
            raise ContractError("cannot record onto a consumed tape")
        for p in parents:
            if p.requires_grad and p._tape is not self:
                self._register_leaf(p)
        self._nodes.append(_Node(parents, vjp))
        out.node_id = len(self._nodes) - 1
        out._tape = self

    def backward(self, loss: Tensor) -> Gradients:
        """Populate gradients for every leaf reachable from ``loss``.

        Visits each node exactly once and consumes the tape.
        """
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward")
        if loss.data.ndim != 0:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        self._consumed = True
        grads: dict[int, np.ndarray] = {}
        leaf_grads: dict[int, np.ndarray] = {}
        if loss._tape is not self or loss.node_id is None:
            return Gradients(self, leaf_grads)
        grads[loss.node_id] = np.ones((), dtype=np.float64)
        for idx in range(loss.node_id, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self._nodes[idx]
            if node.vjp is None:
                leaf_grads[idx] = g
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pid = parent.node_id
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return Gradients(self, leaf_grads)


def backward(loss: Tensor) -> Gradients:
    """Run reverse-mode accumulation on the tape that recorded ``loss``."""
    if loss._tape is None:
        raise ContractError("loss is not attached to a tape")
    return loss._tape.backward(loss)


def _apply(out_data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = _ACTIVE is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _ACTIVE._record(out, tuple(parents), vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses trailing-dim broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _apply(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "subtract")
    return _apply(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "multiply")
    ad, bd = a.data, b.data
    return _apply(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def divide(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "divide")
    ad, bd = a.data, b.data
    return _apply(
        ad / bd,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        ),
    )


def negate(a: Tensor) -> Tensor:
    return _apply(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _apply(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# elementwise functions


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _apply(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    ad = a.data
    return _apply(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)
    return _apply(out, (a,), lambda g: (g * (0.5 / out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _apply(ad * ad, (a,), lambda g: (g * (2.0 * ad),))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _apply(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _apply(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    sig = expit(a.data)
    return _apply(out, (a,), lambda g: (g * sig,))


def silu(a: Tensor) -> Tensor:
    sig = expit(a.data)
    ad = a.data
    return _apply(
        ad * sig,
        (a,),
        lambda g: (g * (sig * (1.0 + ad * (1.0 - sig))),),
    )


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    ad = a.data
    factor = np.where(ad >= 0.0, 1.0, slope)
    return _apply(np.where(ad >= 0.0, ad, slope * ad), (a,), lambda g: (g * factor,))


def clip(a: Tensor, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    """Clamp with pass-through gradient inside [lo, hi], zero outside."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _apply(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and structure


def total(a: Tensor, axis=None, keepdims: bool = False, ordered: bool = False) -> Tensor:
    """Sum reduction.

    ``ordered=True`` (full reduction only) sorts values before summing,
    which makes the result bitwise invariant to any permutation of the
    inputs; the gradient is the same all-ones as a plain sum.
    """
    if ordered:
        if axis is not None:
            raise ContractError("ordered sum supports full reduction only")
        out = np.sum(np.sort(a.data, axis=None))
        return _apply(
            np.asarray(out),
            (a,),
            lambda g: (np.broadcast_to(g, a.shape).copy(),),
        )
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _apply(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False, ordered: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return total(a, axis=axis, keepdims=keepdims, ordered=ordered) / float(count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _apply(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    return _apply(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [(_lift(t)) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _apply(out, tuple(parts), vjp)


def take(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _apply(np.array(out, copy=True), (a,), vjp)


def l2norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` with subgradient 0 on zero slices."""
    ad = a.data
    out = np.sqrt(np.sum(ad * ad, axis=axis))

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.expand_dims(g / safe, axis)
        return (scale * ad,)

    return _apply(out, (a,), vjp)


# ---------------------------------------------------------------------------
# verification helpers


def check_gradient(func: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-4) -> float:
    """Max relative error between tape and central-difference gradients.

    ``func`` must map a tensor to a scalar tensor.  The error metric per
    coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if step <= 0.0:
        raise ContractError("finite-difference step must be positive")
    with Tape() as tape:
        x = Tensor(point.data.copy(), requires_grad=True)
        y = func(x)
        if y.data.ndim != 0:
            raise ContractError("check_gradient requires a scalar-valued function")
        analytic = tape.backward(y).of(x)

    flat = point.data.copy().ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        hi = func(Tensor(bumped.reshape(point.shape))).item()
        bumped[i] -= 2.0 * step
        lo = func(Tensor(bumped.reshape(point.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * step)
    numeric = numeric.reshape(point.shape)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


class SpectralState:
    """Persistent power-iteration vectors for one weight matrix."""

    def __init__(self, rows: int, cols: int, rng: np.random.Generator):
        self.u = rng.standard_normal(rows)
        self.u /= max(np.linalg.norm(self.u), 1e-12)
        self.v = rng.standard_normal(cols)
        self.v /= max(np.linalg.norm(self.v), 1e-12)


def spectral_normalize(weight: Tensor, power_iters: int, state: SpectralState) -> Tensor:
    """Divide ``weight`` by its power-iteration top singular value estimate.

    The left/right vectors persist in ``state`` and are treated as
    constants, so gradients flow only through the sigma = u' W v factor.
    Rank > 2 weights are flattened to (out, rest) for the estimate.
    ``power_iters=0`` freezes the state and reuses the stored vectors
    (side-effect-free evaluation mode).
    """
    if power_iters < 0:
        raise ContractError("power_iters must be >= 0")
    mat = weight.data if weight.ndim == 2 else weight.data.reshape(weight.shape[0], -1)
    u, v = state.u, state.v
    for _ in range(power_iters):
        v = mat.T @ u
        v /= max(np.linalg.norm(v), 1e-12)
        u = mat @ v
        u /= max(np.linalg.norm(u), 1e-12)
    state.u, state.v = u, v

    w2 = weight if weight.ndim == 2 else reshape(weight, (weight.shape[0], -1))
    urow = Tensor(u.reshape(1, -1))
    vcol = Tensor(v.reshape(-1, 1))
    sigma = reshape(matmul(matmul(urow, w2), vcol), ())
    sigma = clip(sigma, lo=np.finfo(np.float64).eps)
    return divide(weight, reshape(sigma, (1,) * weight.ndim))
