"""Dataset bundles: the plain-text on-disk layout and synthetic generators.

Layout of a dataset directory::

    meta.json               task, label kind, counts
    splits.json             {"level": "node"|"graph", "train": [...], "val": [...], "test": [...]}
    graph_<i>.edges         "u<TAB>v" per line
    graph_<i>.features.tsv  "node<TAB>f_1<TAB>...<TAB>f_F" per line
    graph_<i>.labels.tsv    "node<TAB>class" (multiclass) or "node<TAB>y_1...<TAB>y_|Y|" (multilabel)

Floats are written with 17 significant digits so a load/save round trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import CsrGraph
from .objectives import LabelMatrix

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Malformed dataset; the message names the file and, where it applies, the line."""


@dataclass
class DatasetBundle:
    graphs: list[CsrGraph]
    features: list[np.ndarray]
    labels: list[LabelMatrix]
    splits: dict[str, np.ndarray]
    split_level: str = "node"
    task: str = "supervised"
    meta: dict = field(default_factory=dict)

    @property
    def label_kind(self) -> str:
        return self.labels[0].kind

    @property
    def num_features(self) -> int:
        return self.features[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.labels[0].num_classes

    @property
    def multi_graph(self) -> bool:
        return self.split_level == "graph"

    def validate(self) -> None:
        if not self.graphs:
            raise DatasetError("bundle has no graphs")
        if not (len(self.graphs) == len(self.features) == len(self.labels)):
            raise DatasetError("graphs, features and labels differ in count")
        widths = {f.shape[1] for f in self.features}
        if len(widths) != 1:
            raise DatasetError(f"feature width differs across graphs: {sorted(widths)}")
        for i, (g, f, y) in enumerate(zip(self.graphs, self.features, self.labels)):
            if f.shape[0] != g.num_nodes or y.values.shape[0] != g.num_nodes:
                raise DatasetError(f"graph {i}: node count mismatch between graph, features and labels")
        if self.split_level not in ("node", "graph"):
            raise DatasetError(f"split level must be node or graph, got {self.split_level!r}")
        if self.split_level == "node" and len(self.graphs) != 1:
            raise DatasetError("node-level splits need exactly one graph")
        limit = self.graphs[0].num_nodes if self.split_level == "node" else len(self.graphs)
        seen: dict[int, str] = {}
        for name in SPLITS:
            for v in self.splits.get(name, []):
                v = int(v)
                if not 0 <= v < limit:
                    raise DatasetError(f"splits.json: {name} id {v} out of range [0, {limit})")
                if v in seen and seen[v] != name:
                    raise DatasetError(f"splits.json: id {v} appears in both {seen[v]} and {name}")
                seen[v] = name

    def coverage(self) -> dict[str, int]:
        limit = self.graphs[0].num_nodes if self.split_level == "node" else len(self.graphs)
        counts = {k: len(self.splits.get(k, [])) for k in SPLITS}
        counts["unassigned"] = limit - sum(counts.values())
        return counts

    def with_graphs(self, graphs=None, features=None) -> "DatasetBundle":
        return DatasetBundle(graphs if graphs is not None else self.graphs,
                             features if features is not None else self.features,
                             self.labels, self.splits, self.split_level, self.task, dict(self.meta))


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        raise DatasetError(f"{path}: missing file")
    return path.read_text().splitlines()


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(f"{path}: missing file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _parse_rows(path: Path, num_nodes: int, width: int | None, conv) -> tuple[np.ndarray, int, np.ndarray]:
    """Parse node-keyed rows into node order; also returns the width and each row's source line."""
    rows: dict[int, list] = {}
    where: dict[int, int] = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            node = int(parts[0])
            vals = [conv(p) for p in parts[1:]]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: unparsable value") from None
        if not 0 <= node < num_nodes:
            raise DatasetError(f"{path}:{lineno}: node id {node} out of range")
        if node in rows:
            raise DatasetError(f"{path}:{lineno}: duplicate row for node {node}")
        if width is None:
            width = len(vals)
        if len(vals) != width:
            raise DatasetError(f"{path}:{lineno}: ragged row ({len(vals)} values, expected {width})")
        rows[node] = vals
        where[node] = lineno
    if len(rows) != num_nodes:
        missing = next(v for v in range(num_nodes) if v not in rows)
        raise DatasetError(f"{path}: no row for node {missing}")
    order = range(num_nodes)
    return np.asarray([rows[v] for v in order]), width or 0, np.asarray([where[v] for v in order])


def load_dataset(directory) -> DatasetBundle:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"{d}: dataset directory not found")
    meta = _load_json(d / "meta.json")
    for key in ("label_kind", "num_graphs", "num_nodes", "num_classes"):
        if key not in meta:
            raise DatasetError(f"{d / 'meta.json'}: missing field {key!r}")
    kind = meta["label_kind"]
    n_classes = int(meta["num_classes"])
    graphs, feats, labels = [], [], []
    width = meta.get("num_features")
    for i in range(int(meta["num_graphs"])):
        n = int(meta["num_nodes"][i])
        epath = d / f"graph_{i}.edges"
        edges = []
        for lineno, line in enumerate(_read_lines(epath), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{epath}:{lineno}: expected two tab-separated node ids")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise DatasetError(f"{epath}:{lineno}: unparsable node id") from None
            if not (0 <= u < n and 0 <= v < n):
                raise DatasetError(f"{epath}:{lineno}: node id out of range [0, {n})")
            edges.append((u, v))
        graphs.append(CsrGraph.from_edges(n, edges))
        x, width, _ = _parse_rows(d / f"graph_{i}.features.tsv", n, width, float)
        feats.append(x.astype(np.float64).reshape(n, width))
        lpath = d / f"graph_{i}.labels.tsv"
        if kind == "multiclass":
            y, _, lines = _parse_rows(lpath, n, 1, int)
            cls = y.reshape(-1)
            bad = np.flatnonzero((cls < 0) | (cls >= n_classes))
            if bad.size:
                b = int(bad[0])
                raise DatasetError(f"{lpath}:{lines[b]}: label id {int(cls[b])} out of range [0, {n_classes})")
            labels.append(LabelMatrix.from_classes(cls, n_classes))
        else:
            y, _, lines = _parse_rows(lpath, n, n_classes, int)
            bad = np.flatnonzero(~np.isin(y, (0, 1)).all(axis=1))
            if bad.size:
                raise DatasetError(f"{lpath}:{lines[bad[0]]}: multilabel entries must be 0 or 1")
            labels.append(LabelMatrix("multilabel", y.reshape(n, n_classes)))
    sp = _load_json(d / "splits.json")
    splits = {k: np.asarray(sp.get(k, []), dtype=np.int64) for k in SPLITS}
    bundle = DatasetBundle(graphs, feats, labels, splits, sp.get("level", "node"),
                           meta.get("task", "supervised"), meta)
    try:
        bundle.validate()
    except DatasetError as exc:
        raise DatasetError(f"{d}: {exc}") from None
    return bundle


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(bundle: DatasetBundle, directory) -> None:
    bundle.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {k: v for k, v in bundle.meta.items() if not k.startswith("_")}
    meta.update({
        "task": bundle.task,
        "label_kind": bundle.label_kind,
        "num_graphs": len(bundle.graphs),
        "num_nodes": [g.num_nodes for g in bundle.graphs],
        "num_edges": [g.num_edges for g in bundle.graphs],
        "num_features": bundle.num_features,
        "num_classes": bundle.num_classes,
    })
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    splits = {"level": bundle.split_level}
    splits.update({k: sorted(int(v) for v in bundle.splits.get(k, [])) for k in SPLITS})
    (d / "splits.json").write_text(json.dumps(splits, sort_keys=True) + "\n")
    for i, (g, x, y) in enumerate(zip(bundle.graphs, bundle.features, bundle.labels)):
        (d / f"graph_{i}.edges").write_text("".join(f"{u}\t{v}\n" for u, v in g.edges().tolist()))
        (d / f"graph_{i}.features.tsv").write_text(
            "".join(f"{v}\t" + "\t".join(_fmt(a) for a in row) + "\n" for v, row in enumerate(x)))
        if y.kind == "multiclass":
            body = "".join(f"{v}\t{c}\n" for v, c in enumerate(y.classes().tolist()))
        else:
            body = "".join(f"{v}\t" + "\t".join(str(int(a)) for a in row) + "\n" for v, row in enumerate(y.values))
        (d / f"graph_{i}.labels.tsv").write_text(body)


# ---------------------------------------------------------------------------
# synthetic data

SBM_DEFAULTS = {
    "num_nodes": 500,
    "blocks": 4,
    "p_in": 0.05,
    "p_out": 0.01,
    "num_features": 16,
    "feature_signal": 1.0,
    "feature_noise": 1.0,
    "train_frac": 0.6,
    "val_frac": 0.2,
}


def _split_nodes(n: int, rng: np.random.Generator, train_frac: float, val_frac: float) -> dict[str, np.ndarray]:
    perm = rng.permutation(n)
    a = int(round(train_frac * n))
    b = a + int(round(val_frac * n))
    return {"train": np.sort(perm[:a]), "val": np.sort(perm[a:b]), "test": np.sort(perm[b:])}


def make_synthetic(kind: str = "sbm", params: dict | None = None, seed: int = 0) -> DatasetBundle:
    """Stochastic block model graph with block labels and block-correlated Gaussian features.

    ``sbm``: edges inside a block with probability ``p_in``, across with
    ``p_out``. Node features are ``feature_signal`` times a standard-normal
    block centroid plus N(0, ``feature_noise``²) noise.
    ``features_cluster``: same features, but the graph ignores blocks
    (p_out forced equal to p_in), so only features carry the label.
    """
    p = {**SBM_DEFAULTS, **(params or {})}
    n, k = int(p["num_nodes"]), int(p["blocks"])
    p_in, p_out = float(p["p_in"]), float(p["p_out"])
    if kind == "features_cluster":
        p_out = p_in
    elif kind != "sbm":
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if k < 2 or n < k:
        raise ValueError("need at least 2 blocks and one node per block")
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    rng = np.random.default_rng(seed)
    block = np.repeat(np.arange(k), int(np.ceil(n / k)))[:n]
    iu, ju = np.triu_indices(n, k=1)
    same = block[iu] == block[ju]
    prob = np.where(same, p_in, p_out)
    keep = rng.random(len(iu)) < prob
    g = CsrGraph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))

    F = int(p["num_features"])
    centroids = rng.normal(size=(k, F))
    x = float(p["feature_signal"]) * centroids[block] + float(p["feature_noise"]) * rng.normal(size=(n, F))
    labels = LabelMatrix.from_classes(block, k)
    splits = _split_nodes(n, rng, float(p["train_frac"]), float(p["val_frac"]))

    intra = int(np.sum(block[g.row_ids] == block[g.col_indices])) // 2
    meta = {
        "task": "supervised",
        "generator": {"kind": kind, "seed": seed, **{key: p[key] for key in sorted(p)}},
        "edge_homophily": intra / max(g.num_edges, 1),
    }
    return DatasetBundle([g], [x], [labels], splits, "node", "supervised", meta)


def two_cliques(size: int = 10, num_features: int = 8, seed: int = 0, bridge: bool = False,
                train_frac: float = 0.5) -> DatasetBundle:
    """Two disjoint cliques with uninformative random features; labels are clique ids."""
    rng = np.random.default_rng(seed)
    n = 2 * size
    edges = [(u, v) for c in range(2) for u in range(c * size, (c + 1) * size)
             for v in range(u + 1, (c + 1) * size)]
    if bridge:
        edges.append((size - 1, size))
    g = CsrGraph.from_edges(n, edges)
    x = rng.normal(size=(n, num_features))
    block = np.repeat([0, 1], size)
    splits = {"train": [], "val": [], "test": []}
    for c in range(2):
        members = rng.permutation(np.arange(c * size, (c + 1) * size))
        cut = int(round(train_frac * size))
        splits["train"] += members[:cut].tolist()
        splits["test"] += members[cut:].tolist()
    splits = {k: np.sort(np.asarray(v, dtype=np.int64)) for k, v in splits.items()}
    meta = {"task": "unsupervised", "generator": {"kind": "two_cliques", "size": size, "seed": seed}}
    return DatasetBundle([g], [x], [LabelMatrix.from_classes(block, 2)], splits, "node", "unsupervised", meta)
