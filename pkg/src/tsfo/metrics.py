"""FLOP/energy cost models, confidence intervals, and benchmark metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class EnergyParams:
    """Activity-capacitance energy model parameters.

    The defaults (alpha 0.1, 1 nF, 1.2 V, 2 GHz) are illustrative desk-scale
    values for a CPU-class device; every report labels energies derived from
    them as model-based, not measured.
    """

    activity_factor: float = 0.1
    capacitance_f: float = 1e-9
    voltage_v: float = 1.2
    frequency_hz: float = 2e9

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v <= 0:
                raise InputError(f"{name} must be positive, got {v}")
        if self.activity_factor > 1:
            raise InputError("activity factor cannot exceed 1")


def attention_complexity(t: int, d: int) -> int:
    """Self-attention operation count for sequence length t, width d: t^2 d + t d^2."""
    if t < 1 or d < 1:
        raise InputError("t and d must be >= 1")
    return t * t * d + t * d * d


def energy_model(params: EnergyParams, exec_time_s: float) -> float:
    """Dynamic power energy: alpha * C * V^2 * f * T (joules)."""
    if exec_time_s < 0:
        raise InputError("execution time must be nonnegative")
    return (
        params.activity_factor
        * params.capacitance_f
        * params.voltage_v**2
        * params.frequency_hz
        * exec_time_s
    )


@dataclass(frozen=True)
class RunStats:
    """Mean with a 95% confidence half-width (1.96 * s / sqrt(n))."""

    n: int
    mean: float
    std: float
    ci95_half: float

    @property
    def degenerate(self) -> bool:
        """True when a single sample made the half-width trivially zero."""
        return self.n < 2

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "std": self.std, "ci95_half": self.ci95_half}


def ci95(samples) -> RunStats:
    """Sample mean, sample (n-1) standard deviation, and 95% CI half-width."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise InputError("need at least one sample")
    mean = float(arr.mean())
    if arr.size == 1:
        return RunStats(n=1, mean=mean, std=0.0, ci95_half=0.0)
    std = float(arr.std(ddof=1))
    return RunStats(
        n=int(arr.size),
        mean=mean,
        std=std,
        ci95_half=1.96 * std / math.sqrt(arr.size),
    )


def speedup(baseline_time: float, optimized_time: float) -> float:
    """Wall-time ratio baseline / optimized."""
    if baseline_time <= 0 or optimized_time <= 0:
        raise InputError("times must be positive")
    return baseline_time / optimized_time


def energy_saving_pct(energy_base_j: float, energy_opt_j: float) -> float:
    """Percent reduction relative to the baseline energy."""
    if energy_base_j <= 0:
        raise InputError("baseline energy must be positive")
    return 100.0 * (energy_base_j - energy_opt_j) / energy_base_j


def efficiency_score(
    flops_g: float,
    energy_j: float,
    accuracy: float,
    accuracy_base: float,
) -> tuple[float, float, float]:
    """(energy efficiency GFLOPS/J, accuracy retention %, overall EE x AR)."""
    if energy_j <= 0:
        raise InputError("energy must be positive")
    if accuracy_base <= 0:
        raise InputError("baseline accuracy must be positive")
    ee = flops_g / energy_j
    ar = 100.0 * accuracy / accuracy_base
    return ee, ar, ee * ar


def round_sig(x: float, digits: int = 4) -> float:
    """Round to a number of significant digits (report formatting)."""
    if x == 0 or not math.isfinite(x):
        return x
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


# Fields of a MetricsReport whose values depend on wall-clock measurements.
# Determinism checks compare reports with these removed.
TIME_DERIVED_FIELDS = (
    "inference_ms",
    "measured_energy_j",
    "modeled_energy_j",
    "speedup",
    "energy_saving_pct",
    "ee_gflops_per_j",
    "overall_score",
)


@dataclass
class MetricsReport:
    """Per-configuration benchmark outcome.

    ``modeled_energy_j`` is the baseline's activity-capacitance energy with
    the closed-form pruning/quantization factors applied; it is an estimate,
    not a measurement. ``measured_energy_j`` applies the same energy model to
    this configuration's own measured wall time. The two are reported side by
    side and are not forced to agree.
    """

    configuration: str
    accuracy_pct: float
    accuracy_ci_half: float
    accuracy_drop_pct: float
    inference_ms: RunStats
    modeled_energy_j: float
    measured_energy_j: float
    memory_mb: float
    flops_g: float
    speedup: float
    energy_saving_pct: float
    ee_gflops_per_j: float
    accuracy_retention_pct: float
    overall_score: float
    params: int = 0
    sparsity: float = 0.0

    PROVENANCE = {
        "accuracy_pct": "measured",
        "accuracy_drop_pct": "measured",
        "inference_ms": "measured",
        "modeled_energy_j": "modeled",
        "measured_energy_j": "modeled from measured time",
        "memory_mb": "measured",
        "flops_g": "modeled",
        "speedup": "measured",
        "energy_saving_pct": "modeled from measured time",
        "ee_gflops_per_j": "modeled from measured time",
        "accuracy_retention_pct": "measured",
        "overall_score": "modeled from measured time",
    }

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["inference_ms"] = self.inference_ms.to_dict()
        out["overall_score"] = round_sig(self.overall_score, 4)
        out["provenance"] = dict(self.PROVENANCE)
        return out
