"""GNN stacks with depth-wise state combinators, over full graphs or batch hierarchies."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .graph import BatchHierarchy, CsrGraph, self_loop_pattern, sym_normalize
from .layers import (GatLayer, GcnLayer, GruCell, LstmCell, VanillaRnnCell, gat_forward, gcn_forward, glorot,
                     gru_step, lstm_step, rnn_step)

BASES = ("gcn", "gat")
COMBINATORS = ("plain", "res", "rnn", "lstm", "gru")
_VARIANT = re.compile(r"^r?(gcn|gat)(?:-(res|rnn|lstm|gru))?$")


def parse_variant(name: str) -> tuple[str, str]:
    """'gcn' -> (gcn, plain); 'rgcn-lstm' / 'gcn-lstm' -> (gcn, lstm); 'gat-res' -> (gat, res)."""
    m = _VARIANT.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown model variant {name!r}; expected {{gcn|gat}}[-res|-rnn|-lstm|-gru]")
    return m.group(1), m.group(2) or "plain"


def variant_name(base: str, combinator: str) -> str:
    if combinator == "plain":
        return base
    if combinator == "res":
        return f"{base}-res"
    return f"r{base}-{combinator}"


@dataclass
class ModelConfig:
    in_features: int
    hidden: int
    num_classes: int | None
    depth: int = 2
    base: str = "gcn"
    combinator: str = "lstm"
    heads: int = 1
    dropout: float = 0.0
    cell_sharing: str = "shared"
    gat_activation: str = "sigmoid"
    leaky_slope: float = 0.2
    forget_bias: float = 1.0

    def validate(self) -> None:
        if self.base not in BASES:
            raise ValueError(f"base must be one of {BASES}, got {self.base!r}")
        if self.combinator not in COMBINATORS:
            raise ValueError(f"combinator must be one of {COMBINATORS}, got {self.combinator!r}")
        if self.cell_sharing not in ("shared", "per_layer"):
            raise ValueError(f"cell_sharing must be shared or per_layer, got {self.cell_sharing!r}")
        if self.depth < 0 or self.hidden < 1 or self.in_features < 1:
            raise ValueError("depth must be >= 0, hidden and in_features >= 1")
        if self.base == "gat" and self.hidden % self.heads:
            raise ValueError(f"{self.heads} heads do not divide hidden width {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class State:
    h: Tensor
    c: Tensor | None = None


class RgnnModel:
    """Input projection, ``depth`` GNN layers each followed by ELU and a combinator, output head.

    The combinator merges the aggregated input with the previous state:
    ``plain`` keeps the aggregate, ``res`` adds the previous state, and
    ``rnn``/``lstm``/``gru`` run one recurrent step with depth as the time axis.
    GNN parameters are per layer; the recurrent cell is shared across depth
    unless ``cell_sharing='per_layer'``.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        C = config.hidden
        self.W_in = Tensor(glorot(rng, config.in_features, C), requires_grad=True, name="input.W")
        self.b_in = Tensor(np.zeros(C), requires_grad=True, name="input.b")
        self.gnn_layers: list = []
        for l in range(config.depth):
            if config.base == "gcn":
                self.gnn_layers.append(GcnLayer.init(C, C, rng, prefix=f"gnn{l}"))
            else:
                self.gnn_layers.append(GatLayer.init(C, C, config.heads, rng, prefix=f"gnn{l}",
                                                     leaky_slope=config.leaky_slope,
                                                     head_activation=config.gat_activation))
        self.cells: list = []
        if config.combinator in ("rnn", "lstm", "gru"):
            n_cells = config.depth + 1 if config.cell_sharing == "per_layer" else 1
            for k in range(n_cells):
                prefix = "cell" if config.cell_sharing == "shared" else f"cell{k}"
                if config.combinator == "rnn":
                    self.cells.append(VanillaRnnCell.init(C, rng, prefix))
                elif config.combinator == "lstm":
                    self.cells.append(LstmCell.init(C, rng, prefix, config.forget_bias))
                else:
                    self.cells.append(GruCell.init(C, rng, prefix))
        self.W_out = self.b_out = None
        if config.num_classes:
            self.W_out = Tensor(glorot(rng, C, config.num_classes), requires_grad=True, name="output.W")
            self.b_out = Tensor(np.zeros(config.num_classes), requires_grad=True, name="output.b")

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        ps = [self.W_in, self.b_in]
        for layer in self.gnn_layers:
            ps += layer.parameters()
        for cell in self.cells:
            ps += cell.parameters()
        if self.W_out is not None:
            ps += [self.W_out, self.b_out]
        out = {p.name: p for p in ps}
        assert len(out) == len(ps), "duplicate parameter names"
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def _cell(self, step: int):
        # step 0 is the initial projection step; layer l is step l + 1
        return self.cells[step if self.config.cell_sharing == "per_layer" else 0]

    # -- forward ------------------------------------------------------------

    def _combine(self, step: int, x_hat: Tensor, prev: State) -> State:
        comb = self.config.combinator
        if comb == "plain":
            return State(x_hat)
        if comb == "res":
            return State(ad.add(x_hat, prev.h))
        cell = self._cell(step)
        if comb == "lstm":
            h, c = lstm_step(cell, x_hat, prev.h, prev.c)
            return State(h, c)
        if comb == "gru":
            return State(gru_step(cell, x_hat, prev.h))
        return State(rnn_step(cell, x_hat, prev.h))

    def init_hidden(self, x, train_mode: bool = False, rng=None) -> State:
        """H^0: projected features, passed once through the cell against a zero state."""
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.config.in_features:
            raise DimensionError(f"features of shape {x.shape} do not match in_features={self.config.in_features}")
        if train_mode and self.config.dropout > 0:
            x = ad.dropout(x, self.config.dropout, rng, train=True)
        proj = ad.add(ad.matmul(x, self.W_in), self.b_in)
        if self.config.combinator in ("plain", "res"):
            return State(proj)
        zeros = Tensor(np.zeros(proj.shape))
        return self._combine(0, proj, State(zeros, zeros if self.config.combinator == "lstm" else None))

    def _aggregate(self, layer: int, adj, pattern, h: Tensor) -> Tensor:
        gnn = self.gnn_layers[layer]
        if self.config.base == "gcn":
            return gcn_forward(gnn, adj, h)
        return gat_forward(gnn, pattern, h)

    def forward_full(self, g: CsrGraph, x, train_mode: bool = False, rng=None) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[0] != g.num_nodes:
            raise DimensionError(f"graph has {g.num_nodes} nodes but features have {x.shape[0]} rows")
        adj = sym_normalize(g) if self.config.base == "gcn" else None
        pattern = self_loop_pattern(g) if self.config.base == "gat" else None
        state = self.init_hidden(x, train_mode, rng)
        for l in range(self.config.depth):
            x_hat = ad.elu(self._aggregate(l, adj, pattern, state.h))
            state = self._combine(l + 1, x_hat, state)
        return state.h

    def forward_batched(self, hier: BatchHierarchy, x_rows, train_mode: bool = False, rng=None) -> Tensor:
        """States of B_0, aggregated level by level from B_M (whose features are ``x_rows``)."""
        M = self.config.depth
        if hier.depth != M:
            raise DimensionError(f"hierarchy depth {hier.depth} != model depth {M}")
        x_rows = ad.as_tensor(x_rows)
        if x_rows.shape[0] != len(hier.levels[M]):
            raise DimensionError(f"expected {len(hier.levels[M])} feature rows, got {x_rows.shape[0]}")
        state = self.init_hidden(x_rows, train_mode, rng)
        gcn = self.config.base == "gcn"
        for l in range(M):
            level = M - 1 - l
            pat = hier.pattern(level, normalized=gcn)
            agg = self._aggregate(l, pat, pat, state.h)
            keep = np.arange(pat.shape[0])
            prev = State(ad.gather_rows(state.h, keep),
                         ad.gather_rows(state.c, keep) if state.c is not None else None)
            state = self._combine(l + 1, ad.elu(agg), prev)
        return state.h

    def predict(self, h: Tensor) -> Tensor:
        """Logits h @ W_out + b_out."""
        if self.W_out is None:
            raise ValueError("model has no output head")
        if h.shape[1] != self.W_out.shape[0]:
            raise DimensionError(f"hidden width {h.shape[1]} != head input {self.W_out.shape[0]}")
        return ad.add(ad.matmul(h, self.W_out), self.b_out)


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    F, C, M = cfg.in_features, cfg.hidden, cfg.depth
    n = F * C + C
    if cfg.base == "gcn":
        n += M * C * C
    else:
        d = C // cfg.heads
        n += M * cfg.heads * (C * d + 2 * d)
    gates = {"plain": 0, "res": 0, "rnn": 1, "lstm": 4, "gru": 3}[cfg.combinator]
    cells = (M + 1 if cfg.cell_sharing == "per_layer" else 1) if gates else 0
    n += cells * gates * (2 * C * C + C)
    if cfg.num_classes:
        n += C * cfg.num_classes + cfg.num_classes
    return n


# ---------------------------------------------------------------------------
# binary container: magic, u64 header length, JSON header, little-endian f64 payload

MAGIC = b"RGNNTNS1"


class CheckpointError(ValueError):
    pass


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    entries, offset, chunks = [], 0, []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({**header, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a tensor container")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = raw[16 + hlen:]
    tensors = {}
    for e in header.pop("tensors"):
        n = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * n
        if stop > len(payload):
            raise CheckpointError(f"{path}: truncated data for tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header, tensors


def save_checkpoint(path, model: RgnnModel, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    tensors = model.state_dict()
    tensors.update(extra or {})
    write_container(path, {"kind": "checkpoint", "model": asdict(model.config), "meta": meta or {}}, tensors)


def load_checkpoint(path) -> tuple[RgnnModel, dict[str, np.ndarray], dict]:
    """Returns (model, extra tensors not belonging to the model, meta)."""
    header, tensors = read_container(path)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: container is not a checkpoint")
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in header["model"].items() if k in known})
    model = RgnnModel(cfg)
    names = set(model.parameters())
    try:
        model.load_state_dict({k: v for k, v in tensors.items() if k in names})
    except (KeyError, DimensionError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    extra = {k: v for k, v in tensors.items() if k not in names}
    return model, extra, header.get("meta", {})
