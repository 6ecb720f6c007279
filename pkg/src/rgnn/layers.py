"""GCN and GAT aggregation layers and the vanilla RNN / LSTM / GRU cells.

All layers use the row convention: node states are rows, so a linear map is
``x @ W`` and biases broadcast over rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .graph import CsrGraph, SparseMatrix, segment_softmax, self_loop_pattern, spmm, spmm_values


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _param(data, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.data.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{what}: expected width {width}, got shape {x.shape}")


@dataclass
class GcnLayer:
    theta: Tensor

    @classmethod
    def init(cls, c_in: int, c_out: int, rng, prefix: str = "gcn") -> "GcnLayer":
        return cls(_param(glorot(rng, c_in, c_out), f"{prefix}.theta"))

    def parameters(self) -> list[Tensor]:
        return [self.theta]


def gcn_forward(layer: GcnLayer, adj: SparseMatrix, h: Tensor) -> Tensor:
    """spmm(adj, h) @ theta; no activation."""
    _check_width(h, layer.theta.shape[0], "gcn_forward")
    return ad.matmul(spmm(adj, h), layer.theta)


@dataclass
class GatLayer:
    """K attention heads; head k has weight W[k] (C_in x C_out/K) and attention vector a[k] (2C_out/K x 1)."""

    W: list[Tensor]
    a: list[Tensor]
    leaky_slope: float = 0.2
    head_activation: str = "sigmoid"

    @property
    def heads(self) -> int:
        return len(self.W)

    @classmethod
    def init(cls, c_in: int, c_out: int, heads: int, rng, prefix: str = "gat",
             leaky_slope: float = 0.2, head_activation: str = "sigmoid") -> "GatLayer":
        if heads < 1 or c_out % heads:
            raise DimensionError(f"{heads} heads do not divide output width {c_out}")
        d = c_out // heads
        W = [_param(glorot(rng, c_in, d), f"{prefix}.head{k}.W") for k in range(heads)]
        a = [_param(glorot(rng, 2 * d, 1), f"{prefix}.head{k}.a") for k in range(heads)]
        return cls(W, a, leaky_slope, head_activation)

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.W, self.a) for t in pair]


def attention_coefficients(layer: GatLayer, pattern: SparseMatrix, h: Tensor, head: int):
    """Per-entry attention (nnz, 1) of one head, plus the transformed states of that head.

    Rows of ``pattern`` are targets; targets are the first ``pattern.shape[0]``
    rows of ``h``.
    """
    W, a = layer.W[head], layer.a[head]
    d = W.shape[1]
    z = ad.matmul(h, W)
    z_tgt = ad.gather_rows(z, np.arange(pattern.shape[0])) if pattern.shape[0] != h.shape[0] else z
    a_self = ad.gather_rows(a, np.arange(d))
    a_nbr = ad.gather_rows(a, np.arange(d, 2 * d))
    s_self = ad.matmul(z_tgt, a_self)
    s_nbr = ad.matmul(z, a_nbr)
    logits = ad.add(ad.gather_rows(s_self, pattern.row_ids), ad.gather_rows(s_nbr, pattern.indices))
    alpha = segment_softmax(ad.leaky_relu(logits, layer.leaky_slope), pattern)
    return alpha, z


def gat_forward(layer: GatLayer, g: CsrGraph | SparseMatrix, h: Tensor) -> Tensor:
    """Concatenate over heads of act(sum_j alpha_ij W h_j), j over neighbors and the node itself.

    ``g`` is either a graph (self-loops are added) or an aggregation pattern
    that already contains them.
    """
    _check_width(h, layer.W[0].shape[0], "gat_forward")
    pattern = self_loop_pattern(g) if isinstance(g, CsrGraph) else g
    outs = []
    for k in range(layer.heads):
        alpha, z = attention_coefficients(layer, pattern, h, k)
        outs.append(ad.activation(layer.head_activation, spmm_values(pattern, alpha, z)))
    return outs[0] if len(outs) == 1 else ad.concat_cols(outs)


@dataclass
class VanillaRnnCell:
    W: Tensor
    U: Tensor
    b: Tensor

    @classmethod
    def init(cls, c: int, rng, prefix: str = "rnn") -> "VanillaRnnCell":
        return cls(_param(glorot(rng, c, c), f"{prefix}.W"), _param(glorot(rng, c, c), f"{prefix}.U"),
                   _param(np.zeros(c), f"{prefix}.b"))

    def parameters(self) -> list[Tensor]:
        return [self.W, self.U, self.b]


def rnn_step(cell: VanillaRnnCell, x: Tensor, h_prev: Tensor) -> Tensor:
    """h = tanh(h_prev W + x U + b)."""
    _check_width(x, cell.U.shape[0], "rnn_step x")
    _check_width(h_prev, cell.W.shape[0], "rnn_step h_prev")
    return ad.tanh(ad.add(ad.add(ad.matmul(h_prev, cell.W), ad.matmul(x, cell.U)), cell.b))


_LSTM_GATES = ("i", "f", "o", "c")
_GRU_GATES = ("z", "r", "h")


@dataclass
class LstmCell:
    W: dict[str, Tensor]
    U: dict[str, Tensor]
    b: dict[str, Tensor]

    @classmethod
    def init(cls, c: int, rng, prefix: str = "lstm", forget_bias: float = 1.0) -> "LstmCell":
        W = {k: _param(glorot(rng, c, c), f"{prefix}.W_{k}") for k in _LSTM_GATES}
        U = {k: _param(glorot(rng, c, c), f"{prefix}.U_{k}") for k in _LSTM_GATES}
        b = {k: _param(np.full(c, forget_bias if k == "f" else 0.0), f"{prefix}.b_{k}") for k in _LSTM_GATES}
        return cls(W, U, b)

    def parameters(self) -> list[Tensor]:
        return [t for k in _LSTM_GATES for t in (self.W[k], self.U[k], self.b[k])]


def _affine(x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.add(ad.matmul(x, W), ad.matmul(h, U)), b)


def lstm_step(cell: LstmCell, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    width = cell.W["i"].shape[0]
    for t, what in ((x, "x"), (h_prev, "h_prev"), (c_prev, "c_prev")):
        _check_width(t, width, f"lstm_step {what}")
    W, U, b = cell.W, cell.U, cell.b
    i = ad.sigmoid(_affine(x, h_prev, W["i"], U["i"], b["i"]))
    f = ad.sigmoid(_affine(x, h_prev, W["f"], U["f"], b["f"]))
    o = ad.sigmoid(_affine(x, h_prev, W["o"], U["o"], b["o"]))
    c_hat = ad.tanh(_affine(x, h_prev, W["c"], U["c"], b["c"]))
    c = ad.add(ad.hadamard(f, c_prev), ad.hadamard(i, c_hat))
    h = ad.hadamard(o, ad.tanh(c))
    return h, c


@dataclass
class GruCell:
    W: dict[str, Tensor]
    U: dict[str, Tensor]
    b: dict[str, Tensor]

    @classmethod
    def init(cls, c: int, rng, prefix: str = "gru") -> "GruCell":
        W = {k: _param(glorot(rng, c, c), f"{prefix}.W_{k}") for k in _GRU_GATES}
        U = {k: _param(glorot(rng, c, c), f"{prefix}.U_{k}") for k in _GRU_GATES}
        b = {k: _param(np.zeros(c), f"{prefix}.b_{k}") for k in _GRU_GATES}
        return cls(W, U, b)

    def parameters(self) -> list[Tensor]:
        return [t for k in _GRU_GATES for t in (self.W[k], self.U[k], self.b[k])]


def gru_step(cell: GruCell, x: Tensor, h_prev: Tensor) -> Tensor:
    width = cell.W["z"].shape[0]
    _check_width(x, width, "gru_step x")
    _check_width(h_prev, width, "gru_step h_prev")
    W, U, b = cell.W, cell.U, cell.b
    z = ad.sigmoid(_affine(x, h_prev, W["z"], U["z"], b["z"]))
    r = ad.sigmoid(_affine(x, h_prev, W["r"], U["r"], b["r"]))
    h_hat = ad.tanh(_affine(x, ad.hadamard(r, h_prev), W["h"], U["h"], b["h"]))
    # (1 - z) * h_prev + z * h_hat
    return ad.add(h_prev, ad.hadamard(z, ad.sub(h_hat, h_prev)))
