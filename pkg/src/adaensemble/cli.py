"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 data /
schema / checkpoint error, 5 numeric failure (non-finite loss).

A ``train`` run directory holds::

    config.ini      resolved configuration echo
    pipeline.json   fitted feature pipeline
    checkpoint.bin  model tensors + config + pipeline
    history.tsv     per-update losses, k, validation metrics
    manifest.json   seed, data fingerprints, artifact paths, timings
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .config import RunConfig, load_config
from .depth import depth_histogram, format_depth_table
from .features import DataError, FeaturePipeline, FeatureSchema, FitError, SchemaError, read_delimited, write_delimited
from .model import AdaEnsembleModel, ConfigError
from .synthetic import generate_synthetic
from .training import Dataset, NumericError, TrainingInputError, bilevel_train, evaluate, format_history

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_split(path: str, pipeline: FeaturePipeline, delimiter: str) -> Dataset:
    labels, records = read_delimited(path, pipeline.schema.num_fields, delimiter)
    return Dataset(pipeline.transform(records), labels)


# -- fit-pipeline ----------------------------------------------------------------


def cmd_fit_pipeline(args) -> int:
    schema = FeatureSchema.load(args.schema)
    _, records = read_delimited(args.data, None, args.delimiter)
    if records and len(records[0]) != schema.num_fields:
        raise SchemaError(f"data has {len(records[0])} feature columns, schema declares {schema.num_fields}")
    pipe =FeaturePipeline.fit(records, schema, args.bins, args.min_frequency, args.transform)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipe.save(out)
    rows = pipe.summary(records)
    lines = ["field\tkind\tcardinality\tmerged_levels\toov_rate"]
    lines += [f"{r['field']}\t{r['kind']}\t{r['cardinality']}\t{r['merged_levels']}\t{r['oov_rate']:.6f}" for r in rows]
    summary = "\n".join(lines) + "\n"
    out.with_name(out.stem + ".summary.tsv").write_text(summary)
    sys.stdout.write(summary)
    return EXIT_OK


# -- generate-synthetic ----------------------------------------------------------


def cmd_generate_synthetic(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    syn = cfg.synthetic
    data = generate_synthetic(syn.spec(cfg.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), data.split([syn.num_train, syn.num_val, syn.num_test])):
        write_delimited(out / f"{name}.tsv", part.labels, part.records())
        np.savetxt(out / f"{name}.logits", part.logits)
    (out / "schema.json").write_text(
        json.dumps(FeatureSchema.categorical(syn.num_fields).to_dict(), indent=1, sort_keys=True) + "\n"
    )
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def _load_training_data(cfg: RunConfig, pipeline_path: str | None):
    """Returns (pipeline, train, val, fingerprints)."""
    fingerprints: dict[str, str] = {}
    if cfg.data.train:
        if not cfg.data.val:
            raise ConfigError("[data] train is set but val is missing")
        if pipeline_path:
            pipe = FeaturePipeline.load(pipeline_path)
            fingerprints["pipeline"] = _sha256(pipeline_path)
        else:
            if not cfg.data.schema:
                raise ConfigError("[data] schema is required when no --pipeline is given")
            schema = FeatureSchema.load(cfg.data.schema)
            _, records = read_delimited(cfg.data.train, schema.num_fields, cfg.data.delimiter)
            f = cfg.features
            pipe = FeaturePipeline.fit(records, schema, f.bins, f.min_frequency, f.continuous_transform)
        train = _read_split(cfg.data.train, pipe, cfg.data.delimiter)
        val = _read_split(cfg.data.val, pipe, cfg.data.delimiter)
        for key in ("train", "val", "schema"):
            path = getattr(cfg.data, key)
            if path:
                fingerprints[key] = _sha256(path)
        return pipe, train, val, fingerprints
    syn = cfg.synthetic
    spec = syn.spec(cfg.seed)
    data = generate_synthetic(spec)
    tr, va, _ = data.split([syn.num_train, syn.num_val, syn.num_test])
    schema = FeatureSchema.categorical(syn.num_fields, cfg.features.embedding_dim or 8)
    f = cfg.features
    pipe = FeaturePipeline.load(pipeline_path) if pipeline_path else FeaturePipeline.fit(
        tr.records(), schema, f.bins, f.min_frequency, f.continuous_transform
    )
    fingerprints["synthetic"] = hashlib.sha256(repr(spec).encode()).hexdigest()
    return pipe, Dataset(pipe.transform(tr.records()), tr.labels), Dataset(pipe.transform(va.records()), va.labels), fingerprints


def cmd_train(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.data:
        cfg.data.train = args.data
    if args.k is not None:
        cfg.model["k_final"] = args.k
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    pipe, train, val, fingerprints = _load_training_data(cfg, args.pipeline)
    if cfg.features.embedding_dim and "embedding_dim" not in cfg.model:
        cfg.model["embedding_dim"] = cfg.features.embedding_dim
    model_cfg = cfg.model_config(pipe.vocab_sizes())
    train_cfg = cfg.training_config(args.max_steps)
    t_data = time.time()

    model = AdaEnsembleModel(model_cfg, pipe)
    try:
        result = bilevel_train(model, train, val, train_cfg)
    except NumericError as exc:
        dump = {"step": exc.step, "phase": exc.phase, "batch_rows": exc.batch.tolist(), "message": str(exc)}
        (out / "nonfinite_batch.json").write_text(json.dumps(dump, indent=1) + "\n")
        raise
    t_train = time.time()

    (out / "config.ini").write_text(cfg.to_ini())
    pipe.save(out / "pipeline.json")
    model.save(out / "checkpoint.bin")
    (out / "history.tsv").write_text(format_history(result.history))
    manifest = {
        "config": cfg.to_dict(),
        "model_config": model_cfg.to_dict(),
        "training_config": {k: getattr(train_cfg, k) for k in train_cfg.__dataclass_fields__},
        "seed": cfg.seed,
        "fingerprints": fingerprints,
        "artifacts": {
            name: str(out / name) for name in ("config.ini", "pipeline.json", "checkpoint.bin", "history.tsv")
        },
        "best_step": result.best_step,
        "stopped_early": result.stopped_early,
        "timings_s": {"data": t_data - t0, "train": t_train - t_data, "total": time.time() - t0},
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    last = [r for r in result.history if r.phase == "W"]
    if last:
        print(f"trained {len(last)} W updates; final train logloss {last[-1].logloss:.4f}; best step {result.best_step}")
    return EXIT_OK


# -- evaluate / inspect-routing --------------------------------------------------------


def _load_eval(args) -> tuple[AdaEnsembleModel, Dataset]:
    model = AdaEnsembleModel.load(args.checkpoint)
    pipe = FeaturePipeline.load(args.pipeline) if args.pipeline else model.pipeline
    if pipe is None:
        raise DataError("checkpoint carries no feature pipeline; pass --pipeline")
    labels, records = read_delimited(args.data, None, args.delimiter)
    if records and len(records[0]) != pipe.schema.num_fields:
        raise SchemaError(f"data has {len(records[0])} feature columns, pipeline expects {pipe.schema.num_fields}")
    return model, Dataset(pipe.transform(records), labels)


def cmd_evaluate(args) -> int:
    model, data = _load_eval(args)
    label = args.label or ("w/o controller" if args.force_full_depth else "w/ controller")
    report = evaluate(model, data, force_full_depth=args.force_full_depth, k=args.k, label=label)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = args.name or "report"
    (out / f"{stem}.txt").write_text(report.to_text())
    (out / f"{stem}.kv").write_text(report.to_kv())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def routing_report(model: AdaEnsembleModel, data: Dataset, force_full_depth: bool = False, k: int | None = None) -> str:
    """Per-layer selection frequencies, expert-combination paths across layers, depth fractions."""
    out = model.predict(data.indices, force_full_depth=force_full_depth, k=k, trace=True)
    tr = out.trace
    names = [[e.kind.value for e in layer.experts] for layer in model.layers]
    lines = ["# expert selection frequency (share of examples reaching the layer)", "layer\treached\t" + "\t".join(
        f"expert{j + 1}" for j in range(max(len(n) for n in names)))]
    for l, layer_names in enumerate(names):
        reached = tr.reached[l]
        n = int(reached.sum())
        freq = tr.support[l][reached].mean(axis=0) if n else np.zeros(len(layer_names))
        cells = [f"{nm}={100 * f:.2f}%" for nm, f in zip(layer_names, freq)]
        lines.append(f"{l + 1}\t{n}\t" + "\t".join(cells))
    paths: Counter[str] = Counter()
    for i in range(len(data)):
        hops = []
        for l, layer_names in enumerate(names):
            if not tr.reached[l][i]:
                break
            hops.append("+".join(nm for nm, s in zip(layer_names, tr.support[l][i]) if s))
        paths[" > ".join(hops)] += 1
    lines += ["", "# expert combination paths", "count\tfraction\tpath"]
    for path, c in sorted(paths.items(), key=lambda kv: (-kv[1], kv[0])):
        lines.append(f"{c}\t{c / len(data):.6f}\t{path}")
    lines += ["", "# exit depth", format_depth_table(depth_histogram(out.depths, model.config.num_layers))]
    return "\n".join(lines) + "\n"


def cmd_inspect_routing(args) -> int:
    model, data = _load_eval(args)
    text = routing_report(model, data, args.force_full_depth, args.k)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "routing.tsv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaensemble", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit-pipeline", help="fit bucketizers and vocabularies on a training file")
    f.add_argument("--data", required=True)
    f.add_argument("--schema", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--bins", type=int, default=64)
    f.add_argument("--min-frequency", type=int, default=20)
    f.add_argument("--transform", choices=["quantile", "log_square"], default="quantile")
    f.add_argument("--delimiter", default="\t")
    f.set_defaults(func=cmd_fit_pipeline)

    g = sub.add_parser("generate-synthetic", help="write planted-interaction train/val/test files")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate_synthetic)

    t = sub.add_parser("train", help="bi-level training run")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="override [data] train")
    t.add_argument("--pipeline")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--k", type=int, help="override k_final")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "AUC / LogLoss / FLOPs report"),
        ("inspect-routing", cmd_inspect_routing, "expert selection and exit depth report"),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--pipeline")
        e.add_argument("--out-dir", required=True)
        e.add_argument("--force-full-depth", action="store_true", help="disable early exit (every example runs all layers)")
        e.add_argument("--k", type=int, help="override k at evaluation")
        e.add_argument("--delimiter", default="\t")
        if name == "evaluate":
            e.add_argument("--label")
            e.add_argument("--name", help="report file stem (default: report)")
        e.set_defaults(func=func)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrainingInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, FitError, checkpoint.CheckpointError, FileNotFoundError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc} (batch dumped to nonfinite_batch.json)", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
