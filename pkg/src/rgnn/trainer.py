"""Experiment configuration and the supervised / unsupervised training loops."""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import DatasetBundle
from .graph import CsrGraph, build_batch_hierarchy, random_walks
from .metrics import micro_f1
from .model import ModelConfig, RgnnModel, parse_variant
from .objectives import (LabelMatrix, NegativeSampleConfig, ProbeResult, sample_negatives, supervised_loss,
                         train_linear_probe, unsup_loss)
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class NumericalError(FloatingPointError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite training loss {value} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    task: str = "supervised"
    model: str = "rgcn-lstm"
    layers: int = 2
    hidden: int = 64
    heads: int = 1
    dropout: float = 0.0
    cell_sharing: str = "shared"
    gat_activation: str = "sigmoid"
    leaky_slope: float = 0.2
    forget_bias: float = 1.0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    patience: int = 30
    clip_norm: float | None = None
    inductive: bool = True
    batched: bool = False
    batch_size: int = 128
    sizes: list[int] = field(default_factory=list)
    walk_length: int = 2
    negatives: int = 10
    pair_batch_size: int = 128
    probe_epochs: int = 200
    probe_lr: float = 0.01
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration field")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.task not in ("supervised", "unsupervised"):
            raise ConfigError("task", f"must be supervised or unsupervised, got {self.task!r}")
        try:
            base, comb = parse_variant(self.model)
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None
        if not isinstance(self.layers, int) or self.layers < 0:
            raise ConfigError("layers", "must be a non-negative integer")
        if self.hidden < 1:
            raise ConfigError("hidden", "must be >= 1")
        if base == "gat" and (self.heads < 1 or self.hidden % self.heads):
            raise ConfigError("heads", f"{self.heads} heads must divide hidden={self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must be in [0, 1)")
        if self.cell_sharing not in ("shared", "per_layer"):
            raise ConfigError("cell_sharing", "must be shared or per_layer")
        if self.gat_activation not in ("sigmoid", "elu"):
            raise ConfigError("gat_activation", "must be sigmoid or elu")
        if self.lr < 0:
            raise ConfigError("lr", "must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience", "must be >= 1")
        if self.batched or self.sizes:
            if self.layers < 1:
                raise ConfigError("layers", "batched training needs at least one layer")
            if len(self.sizes) != self.layers:
                raise ConfigError("sizes", f"need one sample size per layer ({self.layers}), got {len(self.sizes)}")
            if any(int(s) < 1 for s in self.sizes):
                raise ConfigError("sizes", "sample sizes must be >= 1")
            if self.batch_size < 1:
                raise ConfigError("batch_size", "must be >= 1")
        if self.task == "unsupervised":
            if self.batched:
                raise ConfigError("batched", "unsupervised training runs on full graphs only")
            if self.walk_length < 1:
                raise ConfigError("walk_length", "must be >= 1")
            if self.negatives < 1:
                raise ConfigError("negatives", "must be >= 1")

    def model_config(self, in_features: int, num_classes: int | None) -> ModelConfig:
        base, comb = parse_variant(self.model)
        return ModelConfig(in_features=in_features, hidden=self.hidden, num_classes=num_classes,
                           depth=self.layers, base=base, combinator=comb, heads=self.heads,
                           dropout=self.dropout if self.task == "supervised" else 0.0,
                           cell_sharing=self.cell_sharing, gat_activation=self.gat_activation,
                           leaky_slope=self.leaky_slope, forget_bias=self.forget_bias)


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream per purpose, derived from the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def build_model(cfg: ExperimentConfig, bundle: DatasetBundle) -> RgnnModel:
    num_classes = bundle.num_classes if cfg.task == "supervised" else None
    return RgnnModel(cfg.model_config(bundle.num_features, num_classes), seed=int(stream(cfg.seed, "init").integers(2 ** 31)))


@dataclass
class TrainResult:
    history: list[dict]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_f1: float | None
    test_f1: float
    probe: ProbeResult | None = None
    embeddings: list[np.ndarray] | None = None


# ---------------------------------------------------------------------------
# views of a bundle


@dataclass
class GraphPart:
    graph: CsrGraph
    x: np.ndarray
    y: LabelMatrix
    rows: np.ndarray  # rows of the forward output that the loss / metric covers


def training_parts(bundle: DatasetBundle, inductive: bool = True) -> list[GraphPart]:
    """The graphs seen during training.

    Node-level splits with ``inductive`` train on the subgraph induced by the
    training nodes, so validation and test nodes stay hidden.
    """
    if bundle.multi_graph:
        return [GraphPart(bundle.graphs[i], bundle.features[i], bundle.labels[i],
                          np.arange(bundle.graphs[i].num_nodes)) for i in bundle.splits["train"]]
    train = np.asarray(bundle.splits["train"], dtype=np.int64)
    if len(train) == 0:
        raise ValueError("empty training split")
    g, x, y = bundle.graphs[0], bundle.features[0], bundle.labels[0]
    if inductive:
        return [GraphPart(g.subgraph(train), x[train], y.rows(train), np.arange(len(train)))]
    return [GraphPart(g, x, y, train)]


def eval_parts(bundle: DatasetBundle, split: str) -> list[GraphPart]:
    if bundle.multi_graph:
        return [GraphPart(bundle.graphs[i], bundle.features[i], bundle.labels[i],
                          np.arange(bundle.graphs[i].num_nodes)) for i in bundle.splits[split]]
    return [GraphPart(bundle.graphs[0], bundle.features[0], bundle.labels[0],
                      np.asarray(bundle.splits[split], dtype=np.int64))]


def split_logits(model: RgnnModel, parts: list[GraphPart]) -> tuple[np.ndarray, np.ndarray]:
    logits, labels = [], []
    with ad.no_grad():
        for part in parts:
            h = model.forward_full(part.graph, part.x, train_mode=False)
            logits.append(model.predict(h).data[part.rows])
            labels.append(part.y.values[part.rows])
    return np.concatenate(logits), np.concatenate(labels)


def evaluate(model: RgnnModel, bundle: DatasetBundle, split: str) -> float | None:
    parts = eval_parts(bundle, split)
    if not parts or sum(len(p.rows) for p in parts) == 0:
        return None
    logits, labels = split_logits(model, parts)
    return micro_f1(logits, labels, bundle.label_kind)


# ---------------------------------------------------------------------------
# supervised


def _check_finite(loss: float, epoch: int) -> None:
    if not np.isfinite(loss):
        ad.tape().clear()
        raise NumericalError(epoch, loss)


def _select_loop(model: RgnnModel, bundle: DatasetBundle, cfg: ExperimentConfig,
                 epoch_fn: Callable[[int], float],
                 on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Shared epoch loop: early stopping on validation micro-F1, test on the best parameters."""
    history: list[dict] = []
    best_state = model.state_dict()
    best_val, best_epoch = None, 0
    for epoch in range(cfg.epochs):
        loss = epoch_fn(epoch)
        _check_finite(loss, epoch)
        val = evaluate(model, bundle, "val")
        rec = {"epoch": epoch, "train_loss": loss, "val_f1": val}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        if val is None:
            best_state, best_epoch = model.state_dict(), epoch
            continue
        if best_val is None or val > best_val:
            best_val, best_epoch, best_state = val, epoch, model.state_dict()
        elif epoch - best_epoch >= cfg.patience:
            log.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    model.load_state_dict(best_state)
    test = evaluate(model, bundle, "test")
    return TrainResult(history, best_state, best_epoch, best_val, test if test is not None else float("nan"))


def train_supervised_full(model: RgnnModel, bundle: DatasetBundle, cfg: ExperimentConfig,
                          on_epoch=None) -> TrainResult:
    parts = training_parts(bundle, cfg.inductive)
    params = model.parameters()
    opt = AdamState(cfg.beta1, cfg.beta2, cfg.eps)
    drop_rng = stream(cfg.seed, "dropout")
    order_rng = stream(cfg.seed, "order")

    def epoch_fn(epoch: int) -> float:
        order = order_rng.permutation(len(parts)) if len(parts) > 1 else [0]
        losses = []
        for i in order:
            part = parts[i]
            h = model.forward_full(part.graph, part.x, train_mode=True, rng=drop_rng)
            logits = model.predict(ad.gather_rows(h, part.rows) if len(part.rows) != h.shape[0] else h)
            loss = supervised_loss(logits, part.y.rows(part.rows))
            _check_finite(loss.item(), epoch)
            adam_step(params, ad.backward(loss, params), opt, cfg.lr, cfg.clip_norm)
            losses.append(loss.item())
        return float(np.mean(losses))

    return _select_loop(model, bundle, cfg, epoch_fn, on_epoch)


def batch_loss(model: RgnnModel, part: GraphPart, batch, sizes, rng, train_mode: bool = True,
               drop_rng=None) -> ad.Tensor:
    """Supervised loss on ``batch`` (local node ids of ``part``) via a sampled hierarchy."""
    hier = build_batch_hierarchy(part.graph, batch, sizes, rng)
    h = model.forward_batched(hier, part.x[hier.levels[-1]], train_mode=train_mode, rng=drop_rng)
    return supervised_loss(model.predict(h), part.y.rows(hier.levels[0]))


def train_supervised_batched(model: RgnnModel, bundle: DatasetBundle, cfg: ExperimentConfig,
                             on_epoch=None) -> TrainResult:
    if len(cfg.sizes) != model.config.depth:
        raise ConfigError("sizes", "one sample size per layer required for batched training")
    parts = training_parts(bundle, cfg.inductive)
    params = model.parameters()
    opt = AdamState(cfg.beta1, cfg.beta2, cfg.eps)
    drop_rng = stream(cfg.seed, "dropout")
    order_rng = stream(cfg.seed, "order")
    sample_rng = stream(cfg.seed, "sample")

    def epoch_fn(epoch: int) -> float:
        losses = []
        for i in (order_rng.permutation(len(parts)) if len(parts) > 1 else [0]):
            part = parts[i]
            nodes = order_rng.permutation(part.rows)
            for start in range(0, len(nodes), cfg.batch_size):
                loss = batch_loss(model, part, nodes[start:start + cfg.batch_size], cfg.sizes,
                                  sample_rng, True, drop_rng)
                _check_finite(loss.item(), epoch)
                adam_step(params, ad.backward(loss, params), opt, cfg.lr, cfg.clip_norm)
                losses.append(loss.item())
        return float(np.mean(losses))

    return _select_loop(model, bundle, cfg, epoch_fn, on_epoch)


def train_supervised(model: RgnnModel, bundle: DatasetBundle, cfg: ExperimentConfig, on_epoch=None) -> TrainResult:
    fn = train_supervised_batched if cfg.batched else train_supervised_full
    return fn(model, bundle, cfg, on_epoch)


# ---------------------------------------------------------------------------
# unsupervised


def embed(model: RgnnModel, bundle: DatasetBundle) -> list[np.ndarray]:
    """Final-layer states for every node of every graph (inference mode)."""
    with ad.no_grad():
        return [model.forward_full(g, x, train_mode=False).data.copy()
                for g, x in zip(bundle.graphs, bundle.features)]


def probe_rows(bundle: DatasetBundle, embeddings: list[np.ndarray]):
    """Stacked embeddings and labels with (train, test) row ids for the linear probe."""
    if not bundle.multi_graph:
        return embeddings[0], bundle.labels[0], (bundle.splits["train"], bundle.splits["test"])
    offsets = np.cumsum([0] + [len(e) for e in embeddings])
    rows = {k: np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in bundle.splits[k]])
            if len(bundle.splits[k]) else np.zeros(0, np.int64) for k in ("train", "test")}
    labels = LabelMatrix(bundle.label_kind, np.concatenate([y.values for y in bundle.labels]))
    return np.concatenate(embeddings), labels, (rows["train"], rows["test"])


def train_unsupervised(model: RgnnModel, bundle: DatasetBundle, cfg: ExperimentConfig,
                       on_epoch=None) -> TrainResult:
    parts = training_parts(bundle, cfg.inductive)
    if all(p.graph.num_edges == 0 for p in parts):
        raise ValueError("training graph has no edges, so random walks yield no pairs")
    params = model.parameters()
    opt = AdamState(cfg.beta1, cfg.beta2, cfg.eps)
    walk_rng = stream(cfg.seed, "walks")
    neg_rng = stream(cfg.seed, "negatives")
    neg_cfg = NegativeSampleConfig(cfg.negatives)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for part in parts:
            pairs = random_walks(part.graph, np.arange(part.graph.num_nodes), cfg.walk_length, walk_rng)
            if len(pairs) == 0:
                continue
            negs, _ = sample_negatives(neg_cfg, len(pairs), part.graph.num_nodes, neg_rng, cfg.pair_batch_size)
            h = model.forward_full(part.graph, part.x, train_mode=True)
            loss = unsup_loss(h, pairs, negs)
            _check_finite(loss.item(), epoch)
            adam_step(params, ad.backward(loss, params), opt, cfg.lr, cfg.clip_norm)
            losses.append(loss.item())
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_f1": None}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    emb = embed(model, bundle)
    e, labels, split = probe_rows(bundle, emb)
    probe = train_linear_probe(e, labels, split, cfg.probe_epochs, cfg.probe_lr)
    return TrainResult(history, model.state_dict(), cfg.epochs - 1, None, probe.test_f1, probe, emb)


def run(cfg: ExperimentConfig, bundle: DatasetBundle, on_epoch=None) -> tuple[RgnnModel, TrainResult]:
    cfg.validate()
    model = build_model(cfg, bundle)
    if cfg.task == "unsupervised":
        return model, train_unsupervised(model, bundle, cfg, on_epoch)
    return model, train_supervised(model, bundle, cfg, on_epoch)
