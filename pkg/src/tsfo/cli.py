"""Command-line entry point: synth, train, prune, quantize, eval, bench, report.

Exit codes: 0 success, 2 configuration errors, 3 data/input errors,
4 compute errors. Set TSFO_MAX_THREADS to cap BLAS worker threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .bench import ExperimentConfig, emit_report, load_reports, run_experiment
from .data import load_ucr_delimited, normalize_dataset, subject_wise_split, synth_generate
from .errors import (
    CalibrationError,
    ConfigError,
    InputError,
    ParseError,
    PruneSpecError,
    TsfoError,
)
from .metrics import EnergyParams, MetricsReport, RunStats
from .model import build_model, preset_config
from .pruning import PruneSpec, prune_structured, prune_unstructured
from .quantization import calibrate, quantize_dynamic, quantize_static
from .serialize import MAGIC, load, save_dataset, save_model, save_quantized
from .training import TrainConfig, fine_tune, history_to_csv, train

log = logging.getLogger("tsfo")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_COMPUTE = 4


def load_any_dataset(path):
    """Load either a TSFO dataset container or a UCR-style delimited file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == MAGIC:
        obj = load(path)
        from .data import TimeSeriesDataset

        if not isinstance(obj, TimeSeriesDataset):
            raise InputError(f"{path} is a TSFO container but not a dataset")
        return obj
    return load_ucr_delimited(path)


def _cap_threads():
    cap = os.environ.get("TSFO_MAX_THREADS")
    if not cap:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=int(cap))
    except (ImportError, ValueError):
        log.warning("could not apply TSFO_MAX_THREADS=%s", cap)


def _cmd_synth(args) -> int:
    ds = synth_generate(args.classes, args.per_class, args.length, args.noise, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds)} instances, {ds.num_classes} classes, T={ds.seq_len}")
    return EXIT_OK


def _cmd_train(args) -> int:
    dataset = normalize_dataset(load_any_dataset(args.data))
    train_ds, val_ds = subject_wise_split(dataset, args.train_fraction, args.seed)
    cfg = preset_config(
        args.preset,
        seq_len=dataset.seq_len,
        num_classes=dataset.num_classes,
        in_channels=dataset.channels,
        patch_size=args.patch_size,
    )
    model = build_model(cfg, args.seed)
    model, history = train(
        model,
        train_ds,
        TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed),
        val_dataset=val_ds,
    )
    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "model.tsfo")
    save_model(model, model_path)
    history_to_csv(history, os.path.join(args.out, "history.csv"))
    print(f"wrote {model_path}; final val_acc={history[-1]['val_acc']:.4f}")
    return EXIT_OK


def _cmd_prune(args) -> int:
    model = load(args.model)
    spec = PruneSpec(args.method, args.granularity, args.scope, args.sparsity)
    if args.granularity == "weight":
        model, masks, report = prune_unstructured(model, spec)
        if args.fine_tune_epochs and args.data:
            dataset = normalize_dataset(load_any_dataset(args.data))
            train_ds, _ = subject_wise_split(dataset, 0.7, args.seed)
            model = fine_tune(model, masks, train_ds, args.fine_tune_epochs)
    else:
        model, report = prune_structured(model, spec)
        if args.fine_tune_epochs and args.data:
            dataset = normalize_dataset(load_any_dataset(args.data))
            train_ds, _ = subject_wise_split(dataset, 0.7, args.seed)
            model, _ = train(
                model,
                train_ds,
                TrainConfig(epochs=args.fine_tune_epochs, lr_max=3e-4, seed=args.seed),
            )
    save_model(model, args.out)
    report_path = args.out + ".prune.json"
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    print(f"wrote {args.out} and {report_path}")
    return EXIT_OK


def _cmd_quantize(args) -> int:
    model = load(args.model)
    if args.mode == "static":
        if not args.data:
            raise InputError("static quantization needs --data for calibration")
        dataset = normalize_dataset(load_any_dataset(args.data))
        observers = calibrate(model, dataset.instances[: args.calibration_size])
        qmodel = quantize_static(model, observers)
    else:
        qmodel = quantize_dynamic(model)
    save_quantized(qmodel, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    obj = load(args.model)
    dataset = normalize_dataset(load_any_dataset(args.data))
    from .bench import _accuracy

    acc = _accuracy(obj, dataset)
    print(f"accuracy: {acc:.4f} ({len(dataset)} instances)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"accuracy": acc, "instances": len(dataset)}, fh)
    return EXIT_OK


def _parse_opt(values) -> list[list[str]]:
    return [v.split(",") for v in values]


def _cmd_bench(args) -> int:
    cfg_kwargs = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        dataset = raw.pop("dataset", None)
        if isinstance(dataset, str):
            cfg_kwargs["dataset_path"] = dataset
        elif isinstance(dataset, dict):
            cfg_kwargs["synth"] = dataset.get("synth", dataset)
        if "energy" in raw:
            cfg_kwargs["energy"] = EnergyParams(**raw.pop("energy"))
        if "out" in raw:
            cfg_kwargs["out_dir"] = raw.pop("out")
        cfg_kwargs.update(raw)
    if args.seed is not None:
        cfg_kwargs["seed"] = args.seed
    if args.runs is not None:
        cfg_kwargs["runs"] = args.runs
    if args.preset is not None:
        cfg_kwargs["preset"] = args.preset
    if args.sparsity is not None:
        cfg_kwargs["sparsity"] = args.sparsity
    if args.opt:
        cfg_kwargs["optimizations"] = _parse_opt(args.opt)
    if args.out is not None:
        cfg_kwargs["out_dir"] = args.out
    if args.parallel_train:
        cfg_kwargs["parallel_train"] = True
    config = ExperimentConfig(**cfg_kwargs)
    reports = run_experiment(config)
    written = []
    for fmt in ("json", "csv", "markdown"):
        written += emit_report(reports, fmt, config.out_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_report(args) -> int:
    rows = load_reports(args.reports)
    reports = []
    for row in rows:
        row = dict(row)
        row.pop("provenance", None)
        ms = row.pop("inference_ms")
        row["inference_ms"] = RunStats(**ms)
        reports.append(MetricsReport(**row))
    for path in emit_report(reports, args.format, args.out):
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsfo",
        description="Transformer compression and benchmarking toolkit for time series classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset container")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--length", type=int, default=96)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", default="T1", choices=["T1", "T2"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("prune", help="prune a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--method", default="l1", choices=["l1", "l2"])
    p.add_argument("--granularity", default="weight", choices=["weight", "neuron", "head"])
    p.add_argument("--scope", default="global", choices=["global", "layerwise"])
    p.add_argument("--sparsity", type=float, default=0.4)
    p.add_argument("--data", help="dataset for optional fine-tuning")
    p.add_argument("--fine-tune-epochs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("quantize", help="quantize a saved model to int8")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", default="static", choices=["static", "dynamic"])
    p.add_argument("--data", help="calibration dataset (static mode)")
    p.add_argument("--calibration-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("eval", help="evaluate a saved (possibly quantized) model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="run the full benchmark harness")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--preset", choices=["T1", "T2", "custom"])
    p.add_argument("--sparsity", type=float)
    p.add_argument("--opt", action="append", help="pipeline, comma-separated ops; repeatable")
    p.add_argument("--out")
    p.add_argument(
        "--parallel-train", action="store_true",
        help="train per-run baselines concurrently (timing stays sequential)",
    )
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("report", help="re-emit saved reports in another format")
    p.add_argument("--reports", required=True, help="reports.json from a bench run")
    p.add_argument("--format", default="markdown", choices=["json", "csv", "markdown"])
    p.add_argument("--out", default="results")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PruneSpecError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (ParseError, InputError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (CalibrationError, TsfoError) as exc:
        log.error("compute error: %s", exc)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
