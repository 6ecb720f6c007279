"""Reverse-mode automatic differentiation over dense float64 matrices.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients append a node to the thread-local :class:`Tape`; :func:`backward`
walks the tape once in reverse insertion order and then clears it.

Only one broadcasting pattern is supported: a row vector (shape ``(n,)`` or
``(1, n)``) added to or multiplied with every row of an ``(m, n)`` matrix.
"""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEBUG = bool(os.environ.get("RGNN_DEBUG"))


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "grad", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return ewise("add", self, other)

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return ewise("sub", self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return ewise("hadamard", self, other)

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    enabled: bool = True

    def clear(self) -> None:
        for node in self.nodes:
            node.out.node_id = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def tape() -> Tape:
    """The active tape of the calling thread."""
    t = getattr(_local, "tape", None)
    if t is None:
        t = _local.tape = Tape()
    return t


@contextlib.contextmanager
def no_grad():
    t = tape()
    prev = t.enabled
    t.enabled = False
    try:
        yield
    finally:
        t.enabled = prev


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` in a Tensor and append a tape node if any input needs gradients.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    Other modules define their differentiable kernels through this hook.
    """
    if DEBUG and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    result = Tensor(out)
    t = tape()
    if t.enabled and any(x.requires_grad for x in inputs):
        result.requires_grad = True
        result.node_id = len(t.nodes)
        t.nodes.append(_Node(op, tuple(inputs), result, backward_fn))
    return result


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def _row_vector(b: np.ndarray, ncols: int) -> bool:
    return (b.ndim == 1 and b.shape[0] == ncols) or (b.ndim == 2 and b.shape == (1, ncols))


def ewise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise binary op with optional row-vector broadcast of ``b``."""
    A, B = a.data, b.data
    if A.shape == B.shape:
        broadcast = False
    elif A.ndim == 2 and _row_vector(B, A.shape[1]):
        broadcast = True
    else:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")

    def reduce_b(g: np.ndarray) -> np.ndarray:
        return g.sum(axis=0).reshape(B.shape) if broadcast else g

    if op == "add":
        return record("add", A + B, (a, b), lambda g: (g, reduce_b(g)))
    if op == "sub":
        return record("sub", A - B, (a, b), lambda g: (g, reduce_b(-g)))
    if op == "hadamard":
        return record("hadamard", A * B, (a, b), lambda g: (g * B, reduce_b(g * A)))
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return ewise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return ewise("sub", a, b)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    return ewise("hadamard", a, b)


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record("add_scalar", x.data + c, (x,), lambda g: (g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    X = x.data
    if kind == "sigmoid":
        y = _sigmoid(X)
        return record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(X)
        return record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "elu":
        neg = X < 0
        em1 = np.expm1(np.where(neg, X, 0.0))
        y = np.where(neg, em1, X)
        return record("elu", y, (x,), lambda g: (g * np.where(neg, em1 + 1.0, 1.0),))
    if kind == "leaky_relu":
        neg = X < 0
        y = np.where(neg, slope * X, X)
        return record("leaky_relu", y, (x,), lambda g: (g * np.where(neg, slope, 1.0),))
    if kind == "exp":
        y = np.exp(X)
        return record("exp", y, (x,), lambda g: (g * y,))
    if kind == "log":
        bad = np.argwhere(~(X > 0))
        if bad.size:
            raise DomainError(f"log of non-positive entry at index {tuple(int(i) for i in bad[0])}")
        return record("log", np.log(X), (x,), lambda g: (g / X,))
    if kind == "log_sigmoid":
        # log σ(x) = -log(1 + e^{-x}); d/dx = σ(-x)
        y = -np.logaddexp(0.0, -X)
        return record("log_sigmoid", y, (x,), lambda g: (g * _sigmoid(-X),))
    if kind == "relu":
        pos = X > 0
        return record("relu", np.where(pos, X, 0.0), (x,), lambda g: (g * pos,))
    raise ValueError(f"unknown activation {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return activation("tanh", x)


def elu(x: Tensor) -> Tensor:
    return activation("elu", x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return activation("leaky_relu", x, slope=slope)


def log_sigmoid(x: Tensor) -> Tensor:
    return activation("log_sigmoid", x)


def _check_mask(x: Tensor, mask) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    if m.shape != x.shape:
        raise DimensionError(f"mask shape {m.shape} does not match {x.shape}")
    empty = np.flatnonzero(~m.any(axis=1))
    if empty.size:
        raise NormalizationError(f"row {int(empty[0])} is fully masked")
    return m


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row softmax; masked-out entries are exactly zero."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    m = _check_mask(x, mask)
    X = x.data if m is None else np.where(m, x.data, -np.inf)
    e = np.exp(X - X.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record("softmax_rows", y, (x,), back)


def log_softmax_rows(x: Tensor) -> Tensor:
    X = x.data
    shifted = X - X.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(y)
    return record("log_softmax_rows", y, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    m = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        bad = idx[(idx < 0) | (idx >= m)][0]
        raise IndexError(f"gather_rows index {int(bad)} out of range for {m} rows")
    X = x.data

    def back(g):
        dx = np.zeros_like(X)
        np.add.at(dx, idx, g)
        return (dx,)

    return record("gather_rows", X[idx], (x,), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat_cols shape mismatch: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return record("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


def transpose(x: Tensor) -> Tensor:
    return record("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, np.asarray(g).item()),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return record("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, np.asarray(g).item() / n),))


def sum_cols(x: Tensor) -> Tensor:
    """Sum each row across its columns: (m, n) -> (m, 1)."""
    shape = x.shape
    return record("sum_cols", x.data.sum(axis=1, keepdims=True), (x,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-rate) so inference is unscaled."""
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Accumulate d(loss)/d(leaf) for every reachable leaf and clear the tape.

    Returns a name -> gradient map. When ``params`` is given, every entry of it
    is present in the result; parameters the loss does not reach get zeros.
    Otherwise the map covers the named leaves that were reached.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    t = tape()
    if not loss.requires_grad:
        t.clear()
        raise TapeError("loss does not depend on any tensor that requires gradients")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    for node in reversed(t.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(inp.shape)
            if inp.is_leaf:
                leaves[key] = inp
    t.clear()

    out: dict[str, Tensor] = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        if leaf.name is not None:
            out[leaf.name] = Tensor(grads[key])
    if params is not None:
        full = {}
        for name, p in params.items():
            g = grads.get(id(p)) if id(p) in leaves else None
            full[name] = Tensor(g) if g is not None else Tensor(np.zeros(p.shape))
            if g is None:
                p.grad = np.zeros(p.shape)
        return full
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    rejected: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tol]

    @property
    def ok(self) -> bool:
        return self.rejected is None and not self.failures


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
               tol: float = 1e-6, floor: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` is called with no arguments and must read ``params`` in place. A
    function that is not bit-reproducible (e.g. dropout in train mode) is
    rejected without checking.
    """
    with no_grad():
        first = f().data.copy()
        second = f().data.copy()
    if not np.array_equal(first, second):
        return GradCheckReport({}, tol, rejected="function is not deterministic")

    for p in params.values():
        p.requires_grad = True
    analytic = backward(f(), params)

    errors = {}
    with no_grad():
        for name, p in params.items():
            num = np.zeros(p.shape)
            flat, nflat = p.data.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2.0 * h)
            errors[name] = relative_error(analytic[name].data, num, floor)
    return GradCheckReport(errors, tol)


def parameters_of(tensors: Iterable[Tensor]) -> dict[str, Tensor]:
    return {t.name or f"t{i}": t for i, t in enumerate(tensors)}
