"""Dense float64 tensors with a small, taped set of differentiable operations.

Tensors are immutable: every operation returns a new tensor. When a
:class:`GradientTape` is active (``with GradientTape() as tape:``) and one of
an operation's inputs requires a gradient, the operation is appended to the
tape together with its vector-Jacobian product. :func:`backward` replays the
tape in reverse.
"""

from __future__ import annotations

import contextvars
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from agentgraph.errors import ContractError, DimensionError, NumericError

LEAKY_SLOPE = 0.01

_ACTIVE_TAPE: contextvars.ContextVar[GradientTape | None] = contextvars.ContextVar(
    "agentgraph_tape", default=None
)


class DetachedLossWarning(UserWarning):
    """backward() was asked for a loss that no taped operation produced."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x, name: str) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradientTape:
    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False
    # indices of nodes visited by the last backward pass, in visiting order
    visit_order: list[int] = field(default_factory=list)

    def __enter__(self) -> GradientTape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> GradientTape | None:
    return _ACTIVE_TAPE.get()


class no_grad:
    """Suspend recording inside the block (inference paths)."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def _finish(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op} produced non-finite values")
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise ContractError("tape already consumed by backward()")
        out = Tensor.__new__(Tensor)
        value.setflags(write=False)
        out.data = value
        out.requires_grad = True
        out.name = None
        tape.nodes.append(_Node(op, out, inputs, vjp))
        return out
    out = Tensor.__new__(Tensor)
    value.setflags(write=False)
    out.data = value
    out.requires_grad = False
    out.name = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _finish("matmul", A @ B, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _finish("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product with numpy broadcasting."""
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * B, A.shape) if a.requires_grad else None,
            _unbroadcast(g * A, B.shape) if b.requires_grad else None,
        )

    return _finish("mul", A * B, (a, b), vjp)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return mul(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


# --- element-wise nonlinearities -----------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish("relu", a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    slopes = np.where(a.data > 0, 1.0, slope)
    return _finish("leaky_relu", a.data * slopes, (a,), lambda g: (g * slopes,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of a non-positive value")
    return _finish("log", np.log(x), (a,), lambda g: (g / x,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _finish("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    x = a.data
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax of an empty tensor")
    if mask is not None:
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} != input {x.shape}")
        if not np.all(mask.any(axis=axis)):
            raise DimensionError("softmax: a slice is fully masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", s, (a,), vjp)


# --- structural ----------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of nothing")
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]}"
        ) from None
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", out, tuple(tensors), vjp)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows (first axis) by integer index; repeated indices accumulate."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _finish("take_rows", a.data[idx], (a,), vjp)


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_pool_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise DimensionError(f"mean_pool_rows needs a non-empty matrix, got {a.shape}")
    return mean(a, axis=0, keepdims=True)


def l1_norm(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _finish("l1_norm", np.asarray(np.abs(a.data).sum()), (a,), lambda g: (g * sign,))


# --- reverse pass --------------------------------------------------------


def backward(
    tape: GradientTape, loss: Tensor, params: dict[str, Tensor] | None = None
) -> dict[str, np.ndarray]:
    """Total derivative of ``loss`` w.r.t. every named leaf requiring a gradient.

    When ``params`` is given, parameters the forward pass never touched are
    reported with an all-zero gradient. The tape is consumed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by backward()")
    tape.consumed = True
    produced = any(node.out is loss for node in reversed(tape.nodes))
    if not produced:
        warnings.warn("loss was not produced on this tape; no gradients", DetachedLossWarning)
        tape.nodes = []
        return {}

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    tape.visit_order = []
    for position in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[position]
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        tape.visit_order.append(position)
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.name is not None:
                leaves[key] = inp
    tape.nodes = []

    out = {}
    if params is not None:
        for name, p in params.items():
            out[name] = np.zeros(p.shape)
    for key, leaf in leaves.items():
        if key in grads:
            out[leaf.name] = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
    return out
