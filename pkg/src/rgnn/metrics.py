"""Micro-averaged F1 and run aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .autodiff import DimensionError, Tensor


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        # no positives and no predictions: nothing was gotten wrong
        return 1.0 if denom == 0 else 2 * self.tp / denom


def predictions(logits: np.ndarray, kind: str) -> np.ndarray:
    """0/1 decisions: sigmoid > 0.5 (logit > 0) for multilabel, one-hot argmax for multiclass."""
    if kind == "multilabel":
        return (logits > 0.0).astype(np.int8)
    if kind == "multiclass":
        out = np.zeros(logits.shape, dtype=np.int8)
        out[np.arange(len(logits)), np.argmax(logits, axis=1)] = 1
        return out
    raise ValueError(f"unknown label kind {kind!r}")


def confusion_counts(logits, labels, kind: str) -> ConfusionCounts:
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if logits.shape != y.shape:
        raise DimensionError(f"logits {logits.shape} and labels {y.shape} differ in shape")
    pred = predictions(logits, kind).astype(bool)
    return ConfusionCounts(int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & y)))


def micro_f1(logits, labels, kind: str | None = None) -> float:
    """Micro F1 over all (node, class) decisions.

    ``labels`` is a 0/1 matrix or a LabelMatrix (which carries its kind).
    """
    if hasattr(labels, "kind"):
        kind = kind or labels.kind
        labels = labels.values
    if kind is None:
        raise ValueError("label kind required")
    return confusion_counts(logits, labels, kind).f1


def aggregate_runs(histories: Iterable, field: str | None = None) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator, 0 for one run)."""
    values = []
    for h in histories:
        if isinstance(h, Mapping):
            values.append(float(h[field]))
        else:
            values.append(float(h))
    if not values:
        raise ValueError("aggregate_runs needs at least one run")
    arr = np.asarray(values)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std
