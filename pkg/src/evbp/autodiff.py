"""Minimal tape-based reverse-mode automatic differentiation over float64 arrays.

Operations are recorded on the active :class:`Tape` (entered with ``with Tape():``).
Outside a tape, operations still compute values but nothing is recorded, so the
result carries no gradient path.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(w, Tensor([[3.0], [4.0]])))
    >>> backward(loss)
    >>> w.grad
    array([[3., 4.]])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-12

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "evbp_active_tape", default=None
)


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars go through `scale`.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede outputs;
    :meth:`backward` walks the record in exact reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, rule) -> None:
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(inputs, out, rule, op))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward on an empty tape")
        # Local buffers so repeated passes add exactly one contribution each.
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            node.out._accumulate(g)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                if inp._tape is not self:
                    leaves[key] = inp
        for key, g in pending.items():
            t = leaves.get(key)
            if t is not None:
                t._accumulate(g)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced on a tape")
    loss._tape.backward(loss)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._tape = None
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, rule)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", (a, b), ad @ bd, rule)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: ``x[n, k] + b[k]``."""
    x, b = _wrap(x), _wrap(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")

    def rule(g):
        return g, g.sum(axis=0)

    return _emit("add_bias", (x, b), x.data + b.data, rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)
    src = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {tuple(shape)}") from exc

    def rule(g):
        return (g.reshape(src),)

    return _emit("reshape", (x,), data, rule)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    a = _wrap(a)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0.0  # subgradient at 0 is 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    s = _sigmoid(x.data)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    x = _wrap(x)
    t = np.tanh(x.data)
    return _emit("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive value")
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    if not np.all(np.isfinite(e)):
        raise DomainError("exp overflow")
    return _emit("exp", (x,), e, lambda g: (g * e,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "exp": exp,
}


def elementwise(op: str, *args: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid, "identity": lambda x: x}


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor) -> Tensor:
    x = _wrap(x)
    shape = x.shape
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.broadcast_to(g, shape),))


def mean_all(x: Tensor) -> Tensor:
    x = _wrap(x)
    shape, n = x.shape, x.size
    return _emit(
        "mean", (x,), np.array(x.data.mean()), lambda g: (np.broadcast_to(g / n, shape),)
    )


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = _wrap(x)
    s = softmax_rows(x.data)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, rule)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if n < 1 or t.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {n} rows but targets of shape {t.shape}")
    if np.any(t < 0) or np.any(t >= c):
        raise IndexError(f"target index out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(log_z - shifted[rows, t])

    def rule(g):
        d = np.exp(shifted - log_z[:, None])
        d[rows, t] -= 1.0
        return (d * (g / n),)

    return _emit("softmax_xent", (logits,), np.array(loss), rule)


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean over all entries of ``-[t log p + (1-t) log(1-p)]``, p clamped."""
    probs = _wrap(probs)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise DimensionError(f"binary_cross_entropy: shape mismatch {probs.shape} vs {t.shape}")
    raw = probs.data
    p = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    n = p.size
    inside = (raw > PROB_EPS) & (raw < 1.0 - PROB_EPS)

    def rule(g):
        d = (p - t) / (p * (1.0 - p))
        return (np.where(inside, d, 0.0) * (g / n),)

    return _emit("bce", (probs,), np.array(loss), rule)


def squared_distance(w: Tensor, anchor: np.ndarray) -> Tensor:
    """``||w - anchor||^2`` with ``anchor`` held constant."""
    w = _wrap(w)
    a = np.asarray(anchor, dtype=np.float64)
    if a.shape != w.shape:
        raise DimensionError(f"squared_distance: shape mismatch {w.shape} vs {a.shape}")
    diff = w.data - a
    return _emit("sqdist", (w,), np.array(np.sum(diff * diff)), lambda g: (2.0 * g * diff,))
