"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive computes its output with numpy, checks it is finite and, when
gradients are being recorded, attaches a closure mapping the output gradient
to its inputs' gradients. ``backward`` replays those closures in reverse
topological order of the recorded graph.

Parameters are leaf tensors created with ``requires_grad=True``; their
``grad`` slot starts at zero, accumulates across ``backward`` calls and is
cleared only by :func:`zero_grad`.
"""

from __future__ import annotations

import contextvars
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import (
    AutodiffUsageError,
    DimensionError,
    NumericalError,
    TargetNormalizationError,
)

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-9
LAYER_NORM_EPS = 1e-6
GELU_C = 0.7978845608
GELU_A = 0.044715

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor operator

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str = "",
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        # Leaf parameters own a zeroed grad slot; interior nodes never store one.
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if requires_grad and _backward is None else None
        )

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # ── operator sugar ──

    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, _as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return sub(_as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph (frozen models, evaluation)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _record(out: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"Non-finite value produced by {op}")
    tracked = _grad_enabled.get() and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(out)
    return Tensor(out, requires_grad=True, name=op, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ──────────────── Elementwise primitives ────────────────

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward, "mul")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    inner = GELU_C * (x.data + GELU_A * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * d_inner),)

    return _record(out, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def absolute(x: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(x.data),)

    return _record(np.abs(x.data), (x,), backward, "abs")


# ──────────────── Linear algebra / shape ────────────────

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from exc

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward, "matmul")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"Cannot reshape {x.shape} to {shape}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward, "reshape")


def permute(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"Invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(np.transpose(x.data, axes), (x,), backward, "permute")


def transpose_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[a.shape for a in arrays]} along {axis}") from exc
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), backward, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"Slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record(x.data[index], (x,), backward, "slice")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"Embedding table must be 2-D, got {table.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _record(table.data[ids], (table,), backward, "embedding")


# ──────────────── Reductions ────────────────

def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        count = x.data.size

        def backward(g):
            return (np.full_like(x.data, g / count),)

        return _record(np.asarray(x.data.mean()), (x,), backward, "mean")

    count = x.shape[axis]

    def backward_axis(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).copy(),)

    return _record(x.data.mean(axis=axis), (x,), backward_axis, "mean")


def total(x: Tensor) -> Tensor:
    def backward(g):
        return (np.full_like(x.data, g),)

    return _record(np.asarray(x.data.sum()), (x,), backward, "sum")


# ──────────────── Normalisation ────────────────

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs at least one column, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs features {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centred * inv_std
    out = x_hat * gain.data + bias.data

    def backward(g):
        d_hat = g * gain.data
        dx = inv_std / width * (
            width * d_hat
            - d_hat.sum(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return dx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), backward, "layer_norm")


# ──────────────── Losses ────────────────

def _validate_target(target: np.ndarray, shape: Tuple[int, ...], op: str) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != shape:
        raise DimensionError(f"{op}: target {target.shape} vs input {shape}")
    if not np.allclose(target.sum(axis=-1), 1.0, rtol=0.0, atol=1e-6):
        raise TargetNormalizationError(f"{op}: target rows must sum to 1")
    return target


def cross_entropy_soft(logits: Tensor, target) -> Tensor:
    """Mean over rows of -sum_j target_j * log(softmax(logits)_j).

    ``target`` is a constant probability array (no gradient). Log arguments
    are clamped below at ``LOG_CLAMP``.
    """
    if logits.ndim < 1 or logits.shape[-1] < 2:
        raise DimensionError(f"cross_entropy_soft needs >= 2 classes, got {logits.shape}")
    target = _validate_target(target.data if isinstance(target, Tensor) else target,
                              logits.shape, "cross_entropy_soft")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    clamped = np.maximum(probs, LOG_CLAMP)
    n_rows = probs.size // probs.shape[-1]
    value = -(target * np.log(clamped)).sum() / n_rows

    def backward(g):
        d_probs = np.where(probs > LOG_CLAMP, -target / clamped, 0.0)
        d_logits = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        return (g * d_logits / n_rows,)

    return _record(np.asarray(value), (logits,), backward, "cross_entropy_soft")


def cross_entropy_probs(probs: Tensor, target) -> Tensor:
    """Mean over rows of -sum_j target_j * log(probs_j) for already-normalised inputs."""
    target = _validate_target(target.data if isinstance(target, Tensor) else target,
                              probs.shape, "cross_entropy_probs")
    clamped = np.maximum(probs.data, LOG_CLAMP)
    n_rows = probs.data.size // probs.shape[-1]
    value = -(target * np.log(clamped)).sum() / n_rows

    def backward(g):
        return (g * np.where(probs.data > LOG_CLAMP, -target / clamped, 0.0) / n_rows,)

    return _record(np.asarray(value), (probs,), backward, "cross_entropy_probs")


# ──────────────── Backward pass ────────────────

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable parameter's ``grad``."""
    if loss.data.ndim != 0:
        raise AutodiffUsageError(f"backward() needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for param in params.values():
        if param.requires_grad:
            param.grad = np.zeros_like(param.data)


# ──────────────── Adam ────────────────

@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            second_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            **hyper,
        )


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    grads: Optional[Mapping[str, np.ndarray]] = None,
) -> AdamState:
    """One bias-corrected Adam update.

    Parameter arrays are rebound rather than written in place, so earlier
    snapshots of ``param.data`` stay valid. Gradients default to ``param.grad``.
    """
    if lr <= 0:
        raise ValueError(f"Learning rate must be positive, got {lr}")
    grads = grads if grads is not None else {k: p.grad for k, p in params.items()}

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = grads[name]
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape or state.first_moment[name].shape != param.shape:
            raise DimensionError(f"Adam shape mismatch for {name}: {grad.shape} vs {param.shape}")
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        param.data = param.data - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state
