"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation is recorded on a :class:`Tape`. When an operation's backward
rule will need a buffer, that buffer is entered in the tape's cache ledger
together with the gradient it serves. Buffers that are model parameters (or
views of them) are already resident in memory and are not counted.

Backward rules only retain what they read: an operation none of whose inputs
require a gradient caches nothing.
"""

from __future__ import annotations

import builtins
import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "CacheLedgerEntry",
    "ContractError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "backward",
    "cache_total",
    "cross_entropy",
    "dropout",
    "gather_cols",
    "gelu",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scale",
    "scatter_cols",
    "softmax",
    "sub",
    "sum",
    "transpose",
]


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class TapeError(RuntimeError):
    """The tape is internally inconsistent (e.g. out-of-order nodes)."""


@dataclass(frozen=True)
class CacheLedgerEntry:
    label: str
    element_count: int
    reason: str
    scope: str
    node: int
    kind: str = "activation"  # "activation" or "mask"


@dataclass
class _Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    scope: str


class Tensor:
    """A value on a tape. ``data`` is a float64 ndarray."""

    __array_priority__ = 1000

    def __init__(self, data, tape: Tape, node: int, requires_grad: bool,
                 resident: bool = False, name: str | None = None):
        self.data = data
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad
        self.resident = resident
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _lift(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))


class Tape:
    """Append-only operation record with a trainable-leaf registry."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.ledger: list[CacheLedgerEntry] = []
        self.trainable: dict[str, Tensor] = {}
        self._scopes: list[str] = []

    # -- leaves ---------------------------------------------------------
    def _leaf(self, data, *, requires_grad, resident, name, op) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        node = _Node(len(self.nodes), op, (), None, self.current_scope)
        self.nodes.append(node)
        return Tensor(arr, self, node.id, requires_grad, resident, name)

    def param(self, name: str, array: np.ndarray, trainable: bool = False) -> Tensor:
        """Register a parameter. The array is used without copying."""
        if trainable and name in self.trainable:
            raise ContractError(f"trainable leaf {name!r} registered twice")
        t = self._leaf(array, requires_grad=trainable, resident=True, name=name, op="param")
        if trainable:
            self.trainable[name] = t
        return t

    def constant(self, data, name: str | None = None) -> Tensor:
        """A non-trainable input; cached like any activation when a rule reads it."""
        return self._leaf(data, requires_grad=False, resident=False, name=name, op="input")

    # -- scopes ---------------------------------------------------------
    @property
    def current_scope(self) -> str:
        return self._scopes[-1] if self._scopes else ""

    @contextlib.contextmanager
    def scope(self, name: str) -> Iterator[None]:
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()

    # -- recording ------------------------------------------------------
    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward_fn, saved: Sequence[tuple] = (), resident: bool = False) -> Tensor:
        """Append a node.

        ``saved`` holds ``(tag, buffer, reason[, kind])`` tuples; a buffer given
        as a Tensor is skipped when resident.
        """
        for t in inputs:
            if t.tape is not self:
                raise TapeError(f"{op}: operand recorded on a different tape")
        requires_grad = any(t.requires_grad for t in inputs)
        scope = self.current_scope
        node = _Node(len(self.nodes), op, tuple(t.node for t in inputs),
                     backward_fn if requires_grad else None, scope)
        self.nodes.append(node)
        for item in saved:
            tag, buf, reason = item[:3]
            kind = item[3] if len(item) > 3 else "activation"
            if isinstance(buf, Tensor):
                if buf.resident:
                    continue
                buf = buf.data
            label = f"{scope}/{op}:{tag}" if scope else f"{op}:{tag}"
            self.ledger.append(CacheLedgerEntry(label, int(np.size(buf)), reason, scope,
                                                node.id, kind))
        return Tensor(out, self, node.id, requires_grad, resident)


def cache_total(tape: Tape, kind: str | None = None) -> int:
    """Total cached elements on the tape, optionally restricted to one kind."""
    return int(builtins.sum(e.element_count for e in tape.ledger if kind is None or e.kind == kind))


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for every trainable leaf."""
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.node + 1]):
        if any(i >= node.id for i in node.inputs):
            raise TapeError(f"node {node.id} ({node.op}) reads a later node")
        if node.backward is None:
            continue
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    out = {}
    for name, leaf in tape.trainable.items():
        g = grads.get(leaf.node)
        out[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# operations

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return a.tape.record("add", (a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return a.tape.record("sub", (a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    saved = []
    if a.requires_grad:
        saved.append(("rhs", b, "grad of lhs"))
    if b.requires_grad:
        saved.append(("lhs", a, "grad of rhs"))

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return a.tape.record("mul", (a, b), a.data * b.data, bw, saved)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant; caches nothing."""
    return a.tape.record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} disagree") from None
    saved = []
    if b.requires_grad:
        saved.append(("lhs", a, "grad of rhs"))
    if a.requires_grad:
        saved.append(("rhs", b, "grad of lhs"))

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return a.tape.record("matmul", (a, b), out, bw, saved)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (a view; stays resident if ``a`` is)."""
    return a.tape.record("transpose", (a,), np.swapaxes(a.data, -1, -2),
                         lambda g: (np.swapaxes(g, -1, -2),), resident=a.resident)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return a.tape.record("reshape", (a,), out, lambda g: (g.reshape(src),), resident=a.resident)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return a.tape.record("sum", (a,), np.asarray(a.data.sum()),
                         lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size
        return a.tape.record("mean", (a,), np.asarray(a.data.mean()),
                             lambda g: (np.full(a.shape, float(g) / n),))
    n = a.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return a.tape.record("mean", (a,), a.data.mean(axis=axis), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for x of shape [n, d_in] and w of shape [d_out, d_in]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    saved = []
    if w.requires_grad:
        saved.append(("input", x, "grad of weight"))
    if x.requires_grad:
        saved.append(("weight", w, "grad of input"))

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    inputs = (x, w) if b is None else (x, w, b)
    return x.tape.record("linear", inputs, out, bw, saved)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    saved = [("mask", mask, "grad of input")] if a.requires_grad else []
    return a.tape.record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,), saved)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    saved = [("input", a, "grad of input")] if a.requires_grad else []

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return a.tape.record("gelu", (a,), out, bw, saved)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    saved = [("output", p, "grad of input")] if a.requires_grad else []

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return a.tape.record("softmax", (a,), p, bw, saved)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of a 2-D input, then apply gain and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/shift {shift.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + shift.data
    saved = []
    if x.requires_grad or gain.requires_grad:
        saved.append(("xhat", xhat, "grad of gain/input"))
    if x.requires_grad:
        saved.append(("rstd", rstd, "grad of input"))
        saved.append(("gain", gain, "grad of input"))

    def bw(g):
        gx = gg = gs = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if shift.requires_grad:
            gs = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gs

    return x.tape.record("layer_norm", (x, gain, shift), out, bw, saved)


def gather_cols(x: Tensor, idx: Sequence[int]) -> Tensor:
    """Select columns of the last axis; the index set is metadata, not a buffer."""
    idx = np.asarray(idx, dtype=np.intp)
    width = x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= width):
        raise ShapeError(f"gather_cols: index out of range for width {width}")

    def bw(g):
        out = np.zeros(x.shape)
        np.add.at(out, (..., idx), g)
        return (out,)

    return x.tape.record("gather_cols", (x,), x.data[..., idx], bw)


def scatter_cols(y: Tensor, idx: Sequence[int], width: int) -> Tensor:
    """Place the columns of ``y`` at positions ``idx`` of a zero array of ``width`` columns."""
    idx = np.asarray(idx, dtype=np.intp)
    if y.shape[-1] != idx.size:
        raise ShapeError(f"scatter_cols: {y.shape[-1]} columns for {idx.size} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= width):
        raise ShapeError(f"scatter_cols: index out of range for width {width}")
    out = np.zeros(y.shape[:-1] + (width,))
    out[..., idx] = y.data
    return y.tape.record("scatter_cols", (y,), out, lambda g: (g[..., idx],))


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout. The mask is always counted while training."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    saved = [("mask", keep, "dropout mask", "mask")]
    return x.tape.record("dropout", (x,), x.data * keep, lambda g: (g * keep,), saved)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [b, p] logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b, p = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= p):
        raise ContractError(f"cross_entropy: labels must lie in [0, {p})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.asarray((lse - z[rows, labels]).mean())
    probs = np.exp(z - lse[:, None])
    saved = [("probs", probs, "grad of logits")] if logits.requires_grad else []

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g) / b),)

    return logits.tape.record("cross_entropy", (logits,), loss, bw, saved)
