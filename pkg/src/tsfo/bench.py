"""Experiment runner: train, compress, measure, and aggregate into reports.

The timing protocol is fixed: per configuration, 10 warm-up inferences are
followed by at least 100 timed single-instance inferences pinned to one BLAS
thread, and the median is taken. The baseline is always measured in the same
process as its optimized variants so speed-up ratios compare like with like.
Runs execute sequentially; per-configuration statistics aggregate across
runs as mean with a 95% confidence half-width.
"""

from __future__ import annotations

import contextlib
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    TimeSeriesDataset,
    normalize_dataset,
    subject_wise_split,
    synth_generate,
)
from .errors import ConfigError, InputError
from .metrics import (
    EnergyParams,
    MetricsReport,
    ci95,
    efficiency_score,
    energy_model,
    energy_saving_pct,
    speedup as speedup_ratio,
)
from .model import (
    ModelConfig,
    TransformerModel,
    build_model,
    count_flops,
    count_params,
    forward_batch,
    preset_config,
)
from .pruning import (
    PruneSpec,
    prune_structured,
    prune_unstructured,
    score_weights,
    select_prune_set,
    sparsity as model_sparsity,
)
from .quantization import (
    QuantizedModel,
    calibrate,
    payload_bytes,
    quantize_dynamic,
    quantize_static,
    quantized_forward,
    quantized_forward_batch,
)
from .training import TrainConfig, evaluate, fine_tune, train

KNOWN_OPS = ("static-quant", "dynamic-quant", "l1-prune", "l2-prune", "qat")

# Quantization steps divide the energy estimate by the INT8 precision factor.
Q_FACTOR = 4.0


@contextlib.contextmanager
def single_thread():
    """Pin BLAS pools to one thread for timing fidelity (no-op if unavailable)."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


@dataclass
class ExperimentConfig:
    dataset_path: str | None = None
    synth: dict | None = None
    preset: str = "T1"
    model: dict | None = None            # custom ModelConfig fields
    optimizations: list = field(
        default_factory=lambda: [["static-quant"], ["dynamic-quant"], ["l1-prune"], ["l2-prune"]]
    )
    sparsity: float = 0.4
    runs: int = 5                        # per-config repetitions for the CIs
    seed: int = 0
    out_dir: str = "results"
    energy: EnergyParams = field(default_factory=EnergyParams)
    epochs: int = 30
    fine_tune_epochs: int = 5
    batch_size: int = 32
    train_fraction: float = 0.7
    calibration_size: int = 64
    warmup_inferences: int = 10
    timed_inferences: int = 100
    # trains the per-run baselines concurrently; measurement stays sequential
    parallel_train: bool = False

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.dataset_path is None and self.synth is None:
            raise ConfigError("need a dataset path or a synth spec")
        for pipeline in self.optimizations:
            for op in pipeline:
                if op not in KNOWN_OPS:
                    raise ConfigError(f"unknown optimization {op!r} (choose from {KNOWN_OPS})")
        if self.timed_inferences < 100:
            raise ConfigError("timing protocol requires at least 100 timed inferences")


def _load_experiment_dataset(config: ExperimentConfig) -> TimeSeriesDataset:
    if config.dataset_path is not None:
        from .cli import load_any_dataset

        return normalize_dataset(load_any_dataset(config.dataset_path))
    spec = dict(config.synth)
    spec.setdefault("seed", config.seed)
    return synth_generate(
        num_classes=spec["classes"],
        per_class=spec["per_class"],
        length=spec["length"],
        noise=spec.get("noise", 0.05),
        seed=spec["seed"],
    )


def _model_config(config: ExperimentConfig, dataset: TimeSeriesDataset) -> ModelConfig:
    if config.preset == "custom":
        if not config.model:
            raise ConfigError("custom preset needs a model block")
        fields = dict(config.model)
        fields.setdefault("seq_len", dataset.seq_len)
        fields.setdefault("in_channels", dataset.channels)
        fields.setdefault("num_classes", dataset.num_classes)
        return ModelConfig(**fields)
    patch = 16 if dataset.seq_len >= 512 else 8
    overrides = dict(config.model or {})
    return preset_config(
        config.preset,
        seq_len=dataset.seq_len,
        num_classes=dataset.num_classes,
        in_channels=dataset.channels,
        patch_size=overrides.get("patch_size", patch),
        patch_stride=overrides.get("patch_stride"),
    )


def measure_inference_seconds(
    forward_fn,
    instances: np.ndarray,
    warmups: int = 10,
    timed: int = 100,
) -> float:
    """Median single-instance latency under the fixed timing protocol."""
    n = len(instances)
    with single_thread():
        for i in range(warmups):
            forward_fn(instances[i % n])
        samples = np.empty(timed)
        for i in range(timed):
            x = instances[i % n]
            t0 = time.perf_counter()
            forward_fn(x)
            samples[i] = time.perf_counter() - t0
    return float(np.median(samples))


def _accuracy(model_or_q, dataset: TimeSeriesDataset) -> float:
    if isinstance(model_or_q, QuantizedModel):
        correct = 0
        for start in range(0, len(dataset), 128):
            xs = dataset.instances[start : start + 128]
            logits = quantized_forward_batch(model_or_q, xs)
            correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[start : start + 128]))
        return correct / len(dataset)
    return evaluate(model_or_q, dataset)


def _forward_fn(model_or_q):
    if isinstance(model_or_q, QuantizedModel):
        return lambda x: quantized_forward(model_or_q, x)
    return lambda x: forward_batch(model_or_q, x[None])[0]


def _prune_quantized(qmodel: QuantizedModel, spec: PruneSpec) -> tuple[QuantizedModel, int]:
    """Mask int8 weights to zero; no fine-tuning is possible after quantization.

    Returns the model and the number of weights removed.
    """
    shadow = TransformerModel(
        config=qmodel.config,
        params={name: qmodel.dequantized_param(name) for name in qmodel.weights},
    )
    indices = select_prune_set(
        {n: s for n, s in score_weights(shadow, spec.method).items()}, spec
    )
    for name, idx in indices.items():
        flat = qmodel.weights[name].data.ravel()
        flat[idx] = 0
    return qmodel, int(sum(len(i) for i in indices.values()))


def _apply_pipeline(
    pipeline: list[str],
    baseline: TransformerModel,
    train_ds: TimeSeriesDataset,
    config: ExperimentConfig,
    run_seed: int,
):
    """Apply optimizations in order; returns (model or qmodel, energy factor)."""
    current = baseline.copy()
    energy_factor = 1.0
    base_params = count_params(baseline.config)
    calib = train_ds.instances[: config.calibration_size]
    ft_cfg = TrainConfig(batch_size=config.batch_size, lr_max=3e-4, seed=run_seed + 1)

    for op in pipeline:
        if op in ("static-quant", "dynamic-quant", "qat"):
            if isinstance(current, QuantizedModel):
                raise ConfigError(f"{op} after quantization is not meaningful")
            if op == "qat":
                qat_cfg = replace(ft_cfg, epochs=config.fine_tune_epochs)
                current, _ = train(
                    current, train_ds, qat_cfg, weight_fake_quant=True
                )
                current = quantize_static(current, calibrate(current, calib))
            elif op == "static-quant":
                current = quantize_static(current, calibrate(current, calib))
            else:
                current = quantize_dynamic(current)
            energy_factor /= Q_FACTOR
        elif op == "l1-prune":
            spec = PruneSpec("l1", "weight", "global", config.sparsity)
            if isinstance(current, QuantizedModel):
                current, removed = _prune_quantized(current, spec)
                energy_factor *= 1.0 - removed / base_params
            else:
                current, masks, report = prune_unstructured(current, spec)
                current = fine_tune(
                    current, masks, train_ds, config.fine_tune_epochs, ft_cfg
                )
                energy_factor *= 1.0 - report.params_removed / base_params
        elif op == "l2-prune":
            if isinstance(current, QuantizedModel):
                raise ConfigError("structured pruning after quantization is unsupported")
            for granularity in ("neuron", "head"):
                spec = PruneSpec("l2", granularity, "layerwise", config.sparsity)
                current, report = prune_structured(current, spec)
            removed = base_params - count_params(current.config)
            energy_factor *= 1.0 - removed / base_params
            current, _ = train(
                current, train_ds, replace(ft_cfg, epochs=config.fine_tune_epochs)
            )
        else:  # pragma: no cover - guarded by ExperimentConfig validation
            raise ConfigError(f"unknown optimization {op!r}")
    return current, energy_factor


def _flops_g(obj) -> float:
    return count_flops(obj.config) / 1e9


def run_experiment(config: ExperimentConfig) -> list[MetricsReport]:
    """Train, optimize, and measure every configured pipeline.

    Returns one report per configuration ("baseline" plus one per pipeline),
    aggregated over ``config.runs`` repetitions with 95% CIs.
    """
    dataset = _load_experiment_dataset(config)
    train_ds, test_ds = subject_wise_split(dataset, config.train_fraction, config.seed)
    mcfg = _model_config(config, dataset)

    names = ["baseline"] + ["+".join(p) for p in config.optimizations]
    per_cfg: dict[str, dict[str, list[float]]] = {
        n: {
            "acc": [],
            "time_s": [],
            "mem": [],
            "flops_g": [],
            "sparsity": [],
            "energy_factor": [],
        }
        for n in names
    }

    def train_baseline(run_seed: int) -> TransformerModel:
        model = build_model(mcfg, run_seed)
        model, _ = train(
            model,
            train_ds,
            TrainConfig(epochs=config.epochs, batch_size=config.batch_size, seed=run_seed),
        )
        return model

    run_seeds = [config.seed + run for run in range(config.runs)]
    if config.parallel_train and config.runs > 1:
        # training is a pure function of its seed, so pool scheduling cannot
        # change any result; timing below still runs one config at a time
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(4, config.runs)) as pool:
            baselines = list(pool.map(train_baseline, run_seeds))
    else:
        baselines = [train_baseline(seed) for seed in run_seeds]

    for run_seed, model in zip(run_seeds, baselines):
        base_time = measure_inference_seconds(
            _forward_fn(model),
            test_ds.instances,
            config.warmup_inferences,
            config.timed_inferences,
        )
        stats = per_cfg["baseline"]
        stats["acc"].append(_accuracy(model, test_ds) * 100.0)
        stats["time_s"].append(base_time)
        stats["mem"].append(payload_bytes(model))
        stats["flops_g"].append(_flops_g(model))
        stats["sparsity"].append(model_sparsity(model))
        stats["energy_factor"].append(1.0)

        for pipeline in config.optimizations:
            name = "+".join(pipeline)
            optimized, energy_factor = _apply_pipeline(
                pipeline, model, train_ds, config, run_seed
            )
            opt_time = measure_inference_seconds(
                _forward_fn(optimized),
                test_ds.instances,
                config.warmup_inferences,
                config.timed_inferences,
            )
            stats = per_cfg[name]
            stats["acc"].append(_accuracy(optimized, test_ds) * 100.0)
            stats["time_s"].append(opt_time)
            stats["mem"].append(payload_bytes(optimized))
            stats["flops_g"].append(_flops_g(optimized))
            stats["sparsity"].append(
                model_sparsity(optimized) if not isinstance(optimized, QuantizedModel) else 0.0
            )
            stats["energy_factor"].append(energy_factor)

    base_acc = ci95(per_cfg["baseline"]["acc"]).mean
    base_time = ci95(per_cfg["baseline"]["time_s"]).mean
    base_energy = energy_model(config.energy, base_time)

    reports = []
    for name in names:
        stats = per_cfg[name]
        acc_stats = ci95(stats["acc"])
        time_stats = ci95(stats["time_s"])
        measured_energy = energy_model(config.energy, time_stats.mean)
        modeled_energy = base_energy * float(np.mean(stats["energy_factor"]))
        ee, ar, overall = efficiency_score(
            float(np.mean(stats["flops_g"])), measured_energy, acc_stats.mean, base_acc
        )
        reports.append(
            MetricsReport(
                configuration=name,
                accuracy_pct=acc_stats.mean,
                accuracy_ci_half=acc_stats.ci95_half,
                accuracy_drop_pct=base_acc - acc_stats.mean,
                inference_ms=ci95([t * 1e3 for t in stats["time_s"]]),
                modeled_energy_j=modeled_energy,
                measured_energy_j=measured_energy,
                memory_mb=float(np.mean(stats["mem"])) / 1e6,
                flops_g=float(np.mean(stats["flops_g"])),
                # derived fields recompute exactly from their operand fields
                speedup=speedup_ratio(base_time, time_stats.mean),
                energy_saving_pct=energy_saving_pct(base_energy, measured_energy),
                ee_gflops_per_j=ee,
                accuracy_retention_pct=ar,
                overall_score=overall,
                params=int(count_params(mcfg)),
                sparsity=float(np.mean(stats["sparsity"])),
            )
        )
    return reports


def emit_report(reports: list[MetricsReport], fmt: str, out_dir) -> list[str]:
    """Write the aggregated reports as json, csv, or markdown tables."""
    if not reports:
        raise InputError("nothing to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt == "json":
        path = os.path.join(out_dir, "reports.json")
        with open(path, "w") as fh:
            json.dump({"reports": [r.to_dict() for r in reports]}, fh, indent=2, sort_keys=True)
        written.append(path)
    elif fmt == "csv":
        import csv as _csv

        path = os.path.join(out_dir, "reports.csv")
        rows = [r.to_dict() for r in reports]
        for row in rows:
            ms = row.pop("inference_ms")
            row["inference_ms_mean"] = ms["mean"]
            row["inference_ms_ci95"] = ms["ci95_half"]
            row.pop("provenance")
        with open(path, "w", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=sorted(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        written.append(path)
    elif fmt == "markdown":
        path = os.path.join(out_dir, "report.md")
        with open(path, "w") as fh:
            fh.write(_markdown_tables(reports))
        written.append(path)
    else:
        raise InputError(f"unknown report format {fmt!r}")
    return written


def _markdown_tables(reports: list[MetricsReport]) -> str:
    lines = [
        "# Performance metrics",
        "",
        "Energy values are model-based (activity-capacitance model applied to",
        "measured wall time or to closed-form compression factors), not",
        "physical power measurements.",
        "",
        "| Configuration | Accuracy (%) | Inference Time (ms) | Energy (J, measured-time) | Memory (MB) | FLOPs (G) |",
        "|---|---|---|---|---|---|",
    ]
    for r in reports:
        lines.append(
            f"| {r.configuration} "
            f"| {r.accuracy_pct:.2f} ± {r.accuracy_ci_half:.2f} "
            f"| {r.inference_ms.mean:.3f} ± {r.inference_ms.ci95_half:.3f} "
            f"| {r.measured_energy_j:.4g} "
            f"| {r.memory_mb:.3f} "
            f"| {r.flops_g:.4g} |"
        )
    lines += [
        "",
        "# Energy-accuracy trade-off",
        "",
        "| Configuration | Energy Efficiency (GFLOPS/J) | Accuracy Retention (%) | Overall Score (EE x AR) |",
        "|---|---|---|---|",
    ]
    for r in reports:
        lines.append(
            f"| {r.configuration} | {r.ee_gflops_per_j:.4g} "
            f"| {r.accuracy_retention_pct:.1f} | {r.overall_score:.4g} |"
        )
    lines.append("")
    return "\n".join(lines)


def load_reports(path) -> list[dict]:
    """Read back a JSON report file (lossless round trip of to_dict)."""
    with open(path) as fh:
        data = json.load(fh)
    return data["reports"]
