"""Dense float64 tensors with reverse-mode differentiation over an explicit tape.

Every primitive runs its forward pass eagerly with numpy. When a :class:`Tape`
is active and at least one input requires a gradient, the primitive appends a
:class:`Node` (kind, inputs, output, saved context) to the tape. ``backward``
walks the tape in reverse and dispatches each node to the vector-Jacobian rule
registered for its kind. Nothing is captured in closures, so a tape can be
inspected, replayed and finite-difference checked node by node.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from recrl.errors import ContractViolation, NumericError

DTYPE = np.float64
# Finite stand-in for -inf in masked logits; exp() underflows to exactly 0.
MASK_VALUE = -1e9


class Tensor:
    """A dense array of float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; all routes go through the recorded primitives
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict[str, Any] = field(default_factory=dict)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside the ``with`` block
    are recorded on it. Tapes nest per thread (innermost wins).
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        return backward(self, loss, params)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def _check_finite(arr: np.ndarray, kind: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite output from {kind}")


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, **ctx) -> Tensor:
    _check_finite(out, kind)
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        tape.nodes.append(Node(kind, tuple(inputs), result, ctx))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record("mul", (a, b), a.data * b.data)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    return _record("div", (a, b), a.data / b.data)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data)


def matmul(a, b) -> Tensor:
    """Matrix product. ``a`` may carry leading batch dims; ``b`` is 2-D or batched alike."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ContractViolation(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    return _record("matmul", (a, b), np.matmul(a.data, b.data))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ContractViolation("transpose needs at least 2 dims")
    return _record("transpose", (a,), np.swapaxes(a.data, -1, -2))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: {a.shape} -> {shape}") from None
    return _record("reshape", (a,), out)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _record("tanh", (a,), np.tanh(a.data))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), out)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _record("relu", (a,), np.maximum(a.data, 0.0))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", (a,), out)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _record("log", (a,), np.log(a.data))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _record("softmax", (a,), e / e.sum(axis=axis, keepdims=True), axis=axis)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _record("log_softmax", (a,), out, axis=axis)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    out = np.squeeze(m, axis=axis) + np.log(np.exp(a.data - m).sum(axis=axis))
    return _record("logsumexp", (a,), out, axis=axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _record("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _record("mean", (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), axis=axis, keepdims=keepdims)


def max_(a, axis: int = -1) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = a.data.argmax(axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return _record("max", (a,), out, axis=axis, idx=idx)


def gather_rows(table, idx) -> Tensor:
    """Embedding lookup: ``table[idx]`` for an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise ContractViolation("gather_rows expects a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractViolation(f"gather_rows: index out of range for table of {table.shape[0]} rows")
    return _record("gather_rows", (table,), table.data[idx], idx=idx)


def pick(a, idx) -> Tensor:
    """Select one entry per row of a 2-D tensor: ``a[b, idx[b]]``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ContractViolation(f"pick: bad shapes {a.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ContractViolation("pick: column index out of range")
    return _record("pick", (a,), a.data[np.arange(a.shape[0]), idx], idx=idx)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ContractViolation(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in ts]
    return _record("concat", ts, out, axis=axis, sizes=sizes)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    return _record("slice", (a,), np.array(a.data[key]), key=key)


def masked_fill(a, mask, value: float = MASK_VALUE) -> Tensor:
    """Keep entries where ``mask`` is True, replace the rest by ``value``."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, a.data, value)
    except ValueError:
        raise ContractViolation(f"masked_fill: mask {mask.shape} vs {a.shape}") from None
    if out.shape != a.shape:
        raise ContractViolation(f"masked_fill: mask {mask.shape} vs {a.shape}")
    return _record("masked_fill", (a,), out, mask=np.broadcast_to(mask, a.shape))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lo=lo, hi=hi)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    return _record("minimum", (a, b), np.minimum(a.data, b.data))


def huber(a, delta: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    out = np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))
    return _record("huber", (a,), out, delta=delta)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", (a,), a.data * a.data)


# ---------------------------------------------------------------------------
# vector-Jacobian rules: (node, upstream grad) -> grads per input (None = no grad)

VJP: dict[str, Callable[[Node, np.ndarray], tuple]] = {}


def _vjp(kind):
    def deco(fn):
        VJP[kind] = fn
        return fn

    return deco


@_vjp("add")
def _(n, g):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@_vjp("sub")
def _(n, g):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@_vjp("mul")
def _(n, g):
    a, b = n.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


@_vjp("div")
def _(n, g):
    a, b = n.inputs
    return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)


@_vjp("neg")
def _(n, g):
    return (-g,)


@_vjp("matmul")
def _(n, g):
    a, b = n.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    if b.ndim == 2:
        k, m = a.shape[-1], g.shape[-1]
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
    else:
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return ga, gb


@_vjp("transpose")
def _(n, g):
    return (np.swapaxes(g, -1, -2),)


@_vjp("reshape")
def _(n, g):
    return (g.reshape(n.inputs[0].shape),)


@_vjp("tanh")
def _(n, g):
    y = n.output.data
    return (g * (1.0 - y * y),)


@_vjp("sigmoid")
def _(n, g):
    y = n.output.data
    return (g * y * (1.0 - y),)


@_vjp("relu")
def _(n, g):
    return (g * (n.inputs[0].data > 0),)


@_vjp("exp")
def _(n, g):
    return (g * n.output.data,)


@_vjp("log")
def _(n, g):
    return (g / n.inputs[0].data,)


@_vjp("softmax")
def _(n, g):
    y, ax = n.output.data, n.ctx["axis"]
    return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)


@_vjp("log_softmax")
def _(n, g):
    ax = n.ctx["axis"]
    p = np.exp(n.output.data)
    return (g - p * g.sum(axis=ax, keepdims=True),)


@_vjp("logsumexp")
def _(n, g):
    ax = n.ctx["axis"]
    x = n.inputs[0].data
    p = np.exp(x - np.expand_dims(n.output.data, ax))
    return (p * np.expand_dims(g, ax),)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


@_vjp("sum")
def _(n, g):
    shape = n.inputs[0].shape
    return (np.array(_expand_reduced(g, shape, n.ctx["axis"], n.ctx["keepdims"])),)


@_vjp("mean")
def _(n, g):
    shape = n.inputs[0].shape
    axis = n.ctx["axis"]
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))
    return (np.array(_expand_reduced(g, shape, axis, n.ctx["keepdims"])) / count,)


@_vjp("max")
def _(n, g):
    x = n.inputs[0].data
    ax = n.ctx["axis"]
    out = np.zeros_like(x)
    np.put_along_axis(out, np.expand_dims(n.ctx["idx"], ax), np.expand_dims(g, ax), axis=ax)
    return (out,)


@_vjp("gather_rows")
def _(n, g):
    table = n.inputs[0]
    out = np.zeros_like(table.data)
    np.add.at(out, n.ctx["idx"], g)
    return (out,)


@_vjp("pick")
def _(n, g):
    a = n.inputs[0]
    out = np.zeros_like(a.data)
    out[np.arange(a.shape[0]), n.ctx["idx"]] = g
    return (out,)


@_vjp("concat")
def _(n, g):
    ax = n.ctx["axis"]
    cuts = np.cumsum(n.ctx["sizes"])[:-1]
    return tuple(np.split(g, cuts, axis=ax))


@_vjp("slice")
def _(n, g):
    out = np.zeros_like(n.inputs[0].data)
    if _is_fancy(n.ctx["key"]):
        np.add.at(out, n.ctx["key"], g)
    else:
        out[n.ctx["key"]] = g
    return (out,)


def _is_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


@_vjp("masked_fill")
def _(n, g):
    return (np.where(n.ctx["mask"], g, 0.0),)


@_vjp("clip")
def _(n, g):
    x = n.inputs[0].data
    inside = (x > n.ctx["lo"]) & (x < n.ctx["hi"])
    return (g * inside,)


@_vjp("minimum")
def _(n, g):
    a, b = n.inputs
    take_a = a.data <= b.data
    return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)


@_vjp("huber")
def _(n, g):
    x = n.inputs[0].data
    d = n.ctx["delta"]
    return (g * np.clip(x, -d, d),)


@_vjp("square")
def _(n, g):
    return (2.0 * g * n.inputs[0].data,)


# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape`` and fill ``.grad`` on leaves.

    ``params`` lists leaves that must end with a gradient even when the loss
    does not depend on them (they get zeros). Returns the raw gradient map
    keyed by ``id(tensor)``.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = VJP[node.kind](node, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=DTYPE)
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        _check_finite(grads[key], "backward")
        t.grad = grads[key]
    if params is not None:
        for p in params:
            if id(p) not in leaves:
                p.grad = np.zeros_like(p.data) if id(p) != id(loss) else np.ones_like(p.data)
    return {k: grads[k] for k in leaves}
