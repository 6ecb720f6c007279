#!/usr/bin/env python3
"""Convert a Planetoid citation dataset (Pubmed, Cora, Citeseer) to the rgnn layout.

Expects the raw pickles of the public Planetoid distribution in ``raw_dir``::

    ind.<name>.{x,y,tx,ty,allx,ally,graph,test.index}

Split follows the FastGCN protocol: every labeled node outside the last 500
of ``ally`` and the test index is a training node, those 500 validate, and
``test.index`` tests. Fetching the files is left to the user, e.g.::

    git clone https://github.com/kimiyoung/planetoid
    python scripts/convert_planetoid.py planetoid/data pubmed data/pubmed
    RGNN_PUBMED_DIR=data/pubmed pytest tests/test_acceptance.py -k pubmed

Needs scipy (already an rgnn dependency) to unpickle the sparse matrices.
"""

from __future__ import annotations

import argparse
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from rgnn.data import DatasetBundle, save_dataset
from rgnn.graph import CsrGraph
from rgnn.objectives import LabelMatrix


def _load(raw: Path, name: str, part: str):
    with open(raw / f"ind.{name}.{part}", "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def convert(raw: Path, name: str, val_size: int = 500) -> DatasetBundle:
    x, y, tx, ty, allx, ally, graph = (_load(raw, name, p) for p in ("x", "y", "tx", "ty", "allx", "ally", "graph"))
    test_idx = np.loadtxt(raw / f"ind.{name}.test.index", dtype=np.int64)
    test_sorted = np.sort(test_idx)
    n = max(max(graph) + 1, int(test_sorted.max()) + 1)

    feats = sp.vstack([allx, tx]).tolil()
    labels = np.vstack([ally, ty])
    if len(labels) < n:  # citeseer has isolated test ids without features
        pad = n - len(labels)
        feats = sp.vstack([feats, sp.lil_matrix((pad, feats.shape[1]))]).tolil()
        labels = np.vstack([labels, np.zeros((pad, labels.shape[1]))])
    # test rows are stored in sorted order; put them at their node ids
    feats[test_idx, :] = feats[test_sorted, :]
    labels[test_idx, :] = labels[test_sorted, :]

    edges = [(u, v) for u, nbrs in graph.items() for v in nbrs]
    g = CsrGraph.from_edges(n, edges)
    classes = labels.argmax(axis=1)
    n_labeled = len(ally)
    splits = {
        "train": np.arange(n_labeled - val_size),
        "val": np.arange(n_labeled - val_size, n_labeled),
        "test": test_sorted,
    }
    meta = {"source": f"planetoid:{name}", "split": "fastgcn"}
    return DatasetBundle([g], [np.asarray(feats.todense(), dtype=np.float64)],
                         [LabelMatrix.from_classes(classes, labels.shape[1])], splits, "node", "supervised", meta)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("raw_dir", type=Path)
    p.add_argument("name", help="dataset prefix of the raw files, e.g. pubmed")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--val-size", type=int, default=500)
    args = p.parse_args(argv)
    bundle = convert(args.raw_dir, args.name, args.val_size)
    save_dataset(bundle, args.out_dir)
    print(f"{args.name}: {bundle.graphs[0].num_nodes} nodes, {bundle.graphs[0].num_edges} edges, "
          f"coverage {bundle.coverage()}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
