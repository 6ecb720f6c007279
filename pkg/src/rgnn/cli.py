"""Command-line entry points and experiment orchestration.

Every command writes JSON lines (one object per record) to stdout or ``--out``.
Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
import types
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import DatasetBundle, DatasetError, load_dataset, make_synthetic, save_dataset
from .metrics import aggregate_runs, micro_f1
from .model import CheckpointError, load_checkpoint, save_checkpoint, write_container
from .perturb import PerturbSpec, mutate_features, rewire_edges
from .trainer import ConfigError, ExperimentConfig, NumericalError, embed, evaluate, probe_rows, run, stream

log = logging.getLogger("rgnn")

SCHEMA_VERSION = 1
SCHEMA_PATH = Path(__file__).with_name("schemas") / "run_record.schema.json"
PERTURB_SCOPE = "train+test"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# datasets


def parse_dataset_ref(ref: str) -> tuple[str, dict, int] | None:
    """``synthetic:<kind>[:k=v,...]`` -> (kind, params, seed); anything else is a directory."""
    if not ref.startswith("synthetic:"):
        return None
    parts = ref.split(":", 2)
    kind = parts[1]
    params: dict = {}
    seed = 0
    if len(parts) == 3 and parts[2]:
        for item in parts[2].split(","):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError("dataset", f"malformed synthetic parameter {item!r}")
            try:
                num = float(value)
            except ValueError:
                raise ConfigError("dataset", f"synthetic parameter {key} is not a number: {value!r}") from None
            if key == "seed":
                seed = int(num)
            else:
                params[key] = int(num) if key in ("num_nodes", "blocks", "num_features") else num
    return kind, params, seed


def open_dataset(ref: str | None) -> DatasetBundle:
    if not ref:
        raise ConfigError("dataset", "no dataset given")
    syn = parse_dataset_ref(ref)
    if syn is not None:
        kind, params, seed = syn
        try:
            return make_synthetic(kind, params, seed)
        except (ValueError, KeyError) as exc:
            raise ConfigError("dataset", str(exc)) from None
    return load_dataset(ref)


def perturb_bundle(bundle: DatasetBundle, spec: PerturbSpec) -> DatasetBundle:
    """Apply the perturbation to every graph (train and evaluation alike)."""
    rng = stream(spec.seed, "perturb")
    if spec.kind == "edge_rewire":
        return bundle.with_graphs(graphs=[rewire_edges(g, spec.p, rng) for g in bundle.graphs])
    return bundle.with_graphs(features=[mutate_features(x, spec.p, rng) for x in bundle.features])


# ---------------------------------------------------------------------------
# records


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def record(rtype: str, /, **payload) -> dict:
    return {"schema_version": SCHEMA_VERSION, "record": rtype, **_clean(payload)}


class RecordWriter:
    def __init__(self, path: str | None):
        self._fh = open(path, "w", encoding="utf-8") if path else sys.stdout
        self._own = bool(path)

    def __call__(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._own:
            self._fh.close()


def run_once(cfg: ExperimentConfig, bundle: DatasetBundle, emit=None, timing: bool = True,
             ckpt: str | None = None, perturb: PerturbSpec | None = None) -> dict:
    """One full training run; returns the final record."""
    t0 = time.perf_counter()
    on_epoch = (lambda r: emit(record("epoch", **r))) if emit else None
    model, result = run(cfg, bundle, on_epoch)
    final = record("final", test_f1=result.test_f1, best_epoch=result.best_epoch,
                   best_val_f1=result.best_val_f1, epochs_run=len(result.history),
                   parameter_count=model.parameter_count(), seed=cfg.seed,
                   wall_seconds=time.perf_counter() - t0 if timing else 0.0)
    if ckpt:
        extra = {}
        if result.probe is not None:
            extra = {"probe.W": result.probe.W, "probe.b": result.probe.b}
        meta = {"config": cfg.to_dict(), "test_f1": _clean(result.test_f1)}
        if perturb is not None:
            meta["perturb"] = {"kind": perturb.kind, "p": perturb.p, "seed": perturb.seed, "scope": PERTURB_SCOPE}
        save_checkpoint(ckpt, model, extra, meta)
    if emit:
        emit(final)
    return final


# ---------------------------------------------------------------------------
# config from file + flags


def _flag_type(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _flag_type(args[0])
    return tp


def add_config_flags(p: argparse.ArgumentParser, skip: Iterable[str] = ()) -> None:
    hints = typing.get_type_hints(ExperimentConfig)
    grp = p.add_argument_group("experiment configuration (override --config)")
    for f in fields(ExperimentConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        tp = _flag_type(hints[f.name])
        if tp is bool:
            grp.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        elif typing.get_origin(tp) is list:
            grp.add_argument(flag, dest=f.name, type=int, nargs="*", default=argparse.SUPPRESS)
        else:
            grp.add_argument(flag, dest=f.name, type=tp, default=argparse.SUPPRESS)


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    base: dict = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"{args.config}: no such file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError("config", "config file must hold one JSON object")
    names = {f.name for f in fields(ExperimentConfig)}
    base.update({k: v for k, v in vars(args).items() if k in names})
    return ExperimentConfig.from_dict(base)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args)
    bundle = open_dataset(cfg.dataset)
    out = RecordWriter(args.out)
    try:
        out(record("config", config=cfg.to_dict()))
        run_once(cfg, bundle, out, timing=not args.no_timing, ckpt=args.ckpt)
    finally:
        out.close()
    return EXIT_OK


def _sweep_job(job: tuple) -> float:
    cfg_dict, bundle, spec = job
    cfg = ExperimentConfig.from_dict(cfg_dict)
    if spec is not None:
        bundle = perturb_bundle(bundle, spec)
    return run_once(cfg, bundle, timing=False)["test_f1"]


def _run_jobs(jobs: list, workers: int) -> list[float]:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_job, jobs))
    return [_sweep_job(j) for j in jobs]


def sweep_rows(cfg: ExperimentConfig, bundle: DatasetBundle, variants: list[str], axis: str,
               values: list, repeats: int, kind: str | None = None, workers: int = 1) -> list[dict]:
    """Aggregated (axis value, variant) rows, each over ``repeats`` seeds base_seed + r."""
    if not values:
        raise ConfigError(axis + "s", "must be non-empty")
    if repeats < 1:
        raise ConfigError("repeats", "must be >= 1")
    jobs, keys = [], []
    for value in values:
        for variant in variants:
            for r in range(repeats):
                d = cfg.to_dict()
                d.update(model=variant, seed=cfg.seed + r)
                spec = None
                if axis == "depth":
                    d["layers"] = int(value)
                else:
                    spec = PerturbSpec(kind, float(value), cfg.seed + r)
                ExperimentConfig.from_dict(d)  # fail fast on bad combinations
                jobs.append((d, bundle, spec))
                keys.append((value, variant))
    scores = _run_jobs(jobs, workers)
    rows = []
    for value in values:
        for variant in variants:
            vals = [s for k, s in zip(keys, scores) if k == (value, variant)]
            mean, std = aggregate_runs(vals)
            extra = {"kind": kind, "scope": PERTURB_SCOPE} if axis == "p" else {}
            rows.append(record("sweep", axis=axis, value=value, variant=variant, mean=mean, std=std,
                               values=vals, repeats=repeats, **extra))
    return rows


def _sweep(args, axis: str, values, kind=None) -> int:
    cfg = load_config(args)
    bundle = open_dataset(cfg.dataset)
    variants = args.variants or [cfg.model]
    out = RecordWriter(args.out)
    try:
        out(record("config", config=cfg.to_dict()))
        for row in sweep_rows(cfg, bundle, variants, axis, values, args.repeats, kind, args.workers):
            out(row)
    finally:
        out.close()
    return EXIT_OK


def cmd_sweep_depth(args) -> int:
    return _sweep(args, "depth", args.depths)


def cmd_sweep_perturb(args) -> int:
    for p in args.ps:
        if not 0.0 <= p <= 1.0:
            raise ConfigError("ps", f"probability {p} outside [0, 1]")
    return _sweep(args, "p", args.ps, args.kind)


def _checkpoint_dataset(args, meta: dict, model) -> tuple[DatasetBundle, ExperimentConfig]:
    cfg = ExperimentConfig.from_dict(meta["config"]) if "config" in meta else ExperimentConfig()
    bundle = open_dataset(args.dataset or cfg.dataset)
    if bundle.num_features != model.config.in_features:
        raise CheckpointError(f"checkpoint expects {model.config.in_features} input features, "
                              f"dataset has {bundle.num_features}")
    if model.config.num_classes is not None and bundle.num_classes != model.config.num_classes:
        raise CheckpointError(f"checkpoint predicts {model.config.num_classes} classes, "
                              f"dataset has {bundle.num_classes}")
    return bundle, cfg


def cmd_embed(args) -> int:
    model, _, meta = load_checkpoint(args.ckpt)
    bundle, _ = _checkpoint_dataset(args, meta, model)
    emb = embed(model, bundle)
    tensors = {f"graph_{i}": e for i, e in enumerate(emb)}
    write_container(args.out, {"kind": "embeddings", "graphs": len(emb), "hidden": model.config.hidden}, tensors)
    out = RecordWriter(None)
    out(record("embed", path=args.out, rows=[int(e.shape[0]) for e in emb], dim=model.config.hidden))
    return EXIT_OK


def checkpoint_test_f1(model, extra: dict, bundle: DatasetBundle) -> float:
    """Test micro-F1 from a checkpoint: the model head, or the stored linear probe."""
    if model.config.num_classes is not None:
        return evaluate(model, bundle, "test")
    if "probe.W" not in extra or "probe.b" not in extra:
        raise CheckpointError("checkpoint has neither an output head nor a linear probe")
    e, labels, (_, test) = probe_rows(bundle, embed(model, bundle))
    W, b = extra["probe.W"], extra["probe.b"]
    if W.shape != (e.shape[1], labels.num_classes):
        raise CheckpointError(f"probe shape {W.shape} does not fit embeddings {e.shape[1]} x {labels.num_classes}")
    return micro_f1(e[test] @ W + b, labels.rows(test))


def cmd_eval(args) -> int:
    model, extra, meta = load_checkpoint(args.ckpt)
    bundle, _ = _checkpoint_dataset(args, meta, model)
    f1 = checkpoint_test_f1(model, extra, bundle)
    RecordWriter(args.out)(record("eval", test_f1=f1, checkpoint=str(args.ckpt)))
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    try:
        params = json.loads(args.params) if args.params else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("params", str(exc)) from None
    try:
        bundle = make_synthetic(args.kind, params, args.seed)
    except (ValueError, KeyError) as exc:
        raise ConfigError("params", str(exc)) from None
    save_dataset(bundle, args.out_dir)
    RecordWriter(None)(record("dataset", path=str(args.out_dir), meta=bundle.meta))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are config errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rgnn", description="Recurrent graph neural networks: training and sweeps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat JSON file mirroring the experiment configuration")
        sp.add_argument("--out", help="JSONL output path (default stdout)")
        add_config_flags(sp)

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.add_argument("--ckpt", help="write the best checkpoint here")
    t.add_argument("--no-timing", action="store_true", help="report wall_seconds as 0 for byte-stable output")
    t.set_defaults(fn=cmd_train)

    for name, fn in (("sweep-depth", cmd_sweep_depth), ("sweep-perturb", cmd_sweep_perturb)):
        s = sub.add_parser(name, help="repeat runs over " + ("depths" if name == "sweep-depth" else "noise levels"))
        common(s)
        s.add_argument("--variants", nargs="+", help="model variants, e.g. gcn gcn-res rgcn-lstm")
        s.add_argument("--repeats", type=int, default=5)
        s.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        if name == "sweep-depth":
            s.add_argument("--depths", type=int, nargs="+", required=True)
        else:
            s.add_argument("--kind", choices=("edge_rewire", "feature_noise"), required=True)
            s.add_argument("--ps", type=float, nargs="+", required=True)
        s.set_defaults(fn=fn)

    e = sub.add_parser("embed", help="write final-layer node states from a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", help="defaults to the dataset recorded in the checkpoint")
    e.add_argument("--out", required=True, help="embedding container path")
    e.set_defaults(fn=cmd_embed)

    v = sub.add_parser("eval", help="recompute test micro-F1 from a checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--dataset")
    v.add_argument("--out")
    v.set_defaults(fn=cmd_eval)

    m = sub.add_parser("make-synthetic", help="write a synthetic dataset directory")
    m.add_argument("out_dir")
    m.add_argument("--kind", default="sbm", choices=("sbm", "features_cluster"))
    m.add_argument("--params", help="JSON object of generator parameters")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_make_synthetic)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
