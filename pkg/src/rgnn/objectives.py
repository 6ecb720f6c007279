"""Supervised losses, the negative-sampling walk objective, and the linear probe.

Every loss here is minimized: the log-likelihood objectives are negated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .graph import WalkPairs
from .metrics import micro_f1
from .optim import AdamState, adam_step


@dataclass
class LabelMatrix:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.kind not in ("multiclass", "multilabel"):
            raise ValueError(f"label kind must be multiclass or multilabel, got {self.kind!r}")
        if self.values.ndim != 2:
            raise ValueError(f"labels must be a matrix, got shape {self.values.shape}")
        if not np.isin(self.values, (0, 1)).all():
            raise ValueError("labels must be 0/1")

    @classmethod
    def from_classes(cls, classes, num_classes: int) -> "LabelMatrix":
        classes = np.asarray(classes, dtype=np.int64)
        v = np.zeros((len(classes), num_classes), dtype=np.int8)
        v[np.arange(len(classes)), classes] = 1
        return cls("multiclass", v)

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    def rows(self, idx) -> "LabelMatrix":
        return LabelMatrix(self.kind, self.values[np.asarray(idx, dtype=np.int64)])

    def classes(self) -> np.ndarray:
        return np.argmax(self.values, axis=1)


def _check(logits: Tensor, labels: LabelMatrix, kind: str) -> None:
    if labels.kind != kind:
        raise ValueError(f"{kind} loss given {labels.kind} labels")
    if logits.shape != labels.values.shape:
        raise DimensionError(f"logits {logits.shape} vs labels {labels.values.shape}")


def multilabel_loss(logits: Tensor, labels: LabelMatrix) -> Tensor:
    """-(1/N)(1/|Y|) sum [y log σ(o) + (1-y) log σ(-o)]."""
    _check(logits, labels, "multilabel")
    y = labels.values.astype(np.float64)
    pos = ad.hadamard(ad.log_sigmoid(logits), Tensor(y))
    neg = ad.hadamard(ad.log_sigmoid(ad.scale(logits, -1.0)), Tensor(1.0 - y))
    return ad.scale(ad.mean_all(ad.add(pos, neg)), -1.0)


def multiclass_loss(logits: Tensor, labels: LabelMatrix) -> Tensor:
    """Mean softmax cross-entropy against the true class."""
    _check(logits, labels, "multiclass")
    y = labels.values.astype(np.float64)
    bad = np.flatnonzero(y.sum(axis=1) != 1)
    if bad.size:
        raise ValueError(f"row {int(bad[0])} does not have exactly one true class")
    picked = ad.sum_cols(ad.hadamard(ad.log_softmax_rows(logits), Tensor(y)))
    return ad.scale(ad.mean_all(picked), -1.0)


def supervised_loss(logits: Tensor, labels: LabelMatrix) -> Tensor:
    return multilabel_loss(logits, labels) if labels.kind == "multilabel" else multiclass_loss(logits, labels)


@dataclass(frozen=True)
class NegativeSampleConfig:
    k: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"negative sample size must be >= 1, got {self.k}")


def sample_negatives(cfg: NegativeSampleConfig, num_pairs: int, num_nodes: int, rng,
                     batch_size: int | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """K uniform node ids per batch of pairs, shared by every pair in the batch.

    Returns the (num_pairs, K) id matrix and the list of per-batch shared sets.
    Positives are not excluded.
    """
    if num_nodes < 1:
        raise ValueError("need at least one node to sample negatives from")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    batch_size = batch_size or max(num_pairs, 1)
    out = np.empty((num_pairs, cfg.k), dtype=np.int64)
    shared = []
    for start in range(0, max(num_pairs, 1), batch_size):
        ids = rng.integers(0, num_nodes, size=cfg.k)
        shared.append(ids)
        out[start:start + batch_size] = ids
    return out, shared


def unsup_loss(h: Tensor, pairs: WalkPairs, negs: np.ndarray) -> Tensor:
    """-mean over pairs of [log σ(h_j·h_i) + sum_k log σ(-h_k·h_i)]."""
    src = np.asarray(pairs.sources, dtype=np.int64)
    ctx = np.asarray(pairs.contexts, dtype=np.int64)
    negs = np.asarray(negs, dtype=np.int64)
    if negs.ndim != 2 or negs.shape[0] != len(src):
        raise DimensionError(f"negatives must be ({len(src)}, K), got {negs.shape}")
    if len(src) == 0:
        raise ValueError("no pairs to score")
    k = negs.shape[1]
    h_src = ad.gather_rows(h, src)
    pos = ad.log_sigmoid(ad.sum_cols(ad.hadamard(h_src, ad.gather_rows(h, ctx))))
    h_src_rep = ad.gather_rows(h, np.repeat(src, k))
    neg_dots = ad.sum_cols(ad.hadamard(h_src_rep, ad.gather_rows(h, negs.reshape(-1))))
    neg = ad.log_sigmoid(ad.scale(neg_dots, -1.0))
    total = ad.add(ad.sum_all(pos), ad.sum_all(neg))
    return ad.scale(total, -1.0 / len(src))


@dataclass
class ProbeResult:
    W: np.ndarray
    b: np.ndarray
    test_f1: float
    kind: str

    def logits(self, embeddings) -> np.ndarray:
        e = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
        return e @ self.W + self.b


def train_linear_probe(embeddings, labels: LabelMatrix, split: tuple, epochs: int = 200,
                       lr: float = 0.01) -> ProbeResult:
    """Logistic regression on frozen embeddings, full-batch Adam on the train rows.

    ``split`` is (train_ids, test_ids); returns the probe and its test micro-F1.
    """
    e = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] < 1:
        raise ValueError(f"embeddings need at least one dimension, got shape {e.shape}")
    train, test = (np.asarray(s, dtype=np.int64) for s in split)
    if len(train) == 0 or len(test) == 0:
        raise ValueError("probe needs non-empty train and test splits")
    x_train = Tensor(e[train])
    y_train = labels.rows(train)
    W = Tensor(np.zeros((e.shape[1], labels.num_classes)), requires_grad=True, name="probe.W")
    b = Tensor(np.zeros(labels.num_classes), requires_grad=True, name="probe.b")
    params = {"probe.W": W, "probe.b": b}
    state = AdamState()
    for _ in range(epochs):
        loss = supervised_loss(ad.add(ad.matmul(x_train, W), b), y_train)
        adam_step(params, ad.backward(loss, params), state, lr)
    logits = e[test] @ W.data + b.data
    return ProbeResult(W.data.copy(), b.data.copy(), micro_f1(logits, labels.rows(test)), labels.kind)
