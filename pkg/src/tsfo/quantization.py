"""Post-training quantization (static and dynamic) and QAT fake-quantization.

Weights are quantized symmetrically, per output channel for matrices and per
tensor for vectors; activations use an affine per-tensor map. Static mode
fixes activation ranges from calibration observers; dynamic mode derives a
symmetric scale from each activation block at call time. Normalization,
softmax, and residual adds always run in float; only the weight-bearing
matmuls are integerized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, InputError
from .model import (
    ModelConfig,
    TransformerModel,
    _merge_heads,
    _split_heads,
    forward_batch,
    positional_encoding,
)
from .tensor import (
    INT8_MAX,
    INT8_MIN,
    QTensor,
    dequantize_linear,
    im2col_batch,
    int8_matmul,
    layer_norm,
    quantize_linear,
    relu,
    round_half_away,
    softmax,
)

_SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 8
    weight_mode: str = "symmetric_per_channel"
    activation_mode: str = "affine_per_tensor"

    @property
    def q_factor(self) -> float:
        """Precision ratio against FP32 (4 for INT8)."""
        return 32.0 / self.bits


def scale_zero_point(min_val: float, max_val: float, mode: str = "affine"):
    """Quantization parameters for an observed [min, max] range.

    Affine: scale = (max - min) / 255, zero_point = round(-128 - min/scale)
    clamped to int8. Symmetric: scale = max(|min|, |max|) / 127, zero_point 0.
    A degenerate range (min == max) falls back to a symmetric scale of
    max(|max|, 1e-8) / 127.
    """
    if mode not in ("affine", "symmetric"):
        raise InputError(f"mode must be affine or symmetric, got {mode!r}")
    if min_val > max_val:
        raise InputError(f"min {min_val} exceeds max {max_val}")
    if min_val == max_val:
        return max(abs(max_val), _SCALE_FLOOR) / 127.0, 0
    if mode == "symmetric":
        return max(abs(min_val), abs(max_val)) / 127.0, 0
    scale = (max_val - min_val) / 255.0
    zp = int(round_half_away(np.float64(-128.0 - min_val / scale)))
    return scale, int(np.clip(zp, INT8_MIN, INT8_MAX))


@dataclass
class CalibrationObserver:
    """Running min/max of one activation site over calibration batches."""

    site: str
    min_val: float = math.inf
    max_val: float = -math.inf
    batches: int = 0

    def update(self, x: np.ndarray) -> None:
        self.min_val = min(self.min_val, float(np.min(x)))
        self.max_val = max(self.max_val, float(np.max(x)))
        self.batches += 1

    @property
    def valid(self) -> bool:
        return self.batches > 0 and self.min_val <= self.max_val


def activation_sites(config: ModelConfig) -> list[str]:
    """The observed sites: input of every weight-bearing matmul."""
    sites = ["embed.in"]
    for l in range(config.num_layers):
        sites += [
            f"layers.{l}.attn.qkv.in",
            f"layers.{l}.attn.proj.in",
            f"layers.{l}.ffn.in",
            f"layers.{l}.ffn.mid.in",
        ]
    sites.append("classifier.in")
    return sites


def calibrate(
    model: TransformerModel,
    instances: np.ndarray,
    batch_size: int = 64,
) -> dict[str, CalibrationObserver]:
    """Eval-mode pass over calibration data recording per-site min/max."""
    xs = np.asarray(instances)
    if xs.ndim == 2:
        xs = xs[None]
    if len(xs) == 0:
        raise InputError("calibration needs at least one instance")
    observers = {s: CalibrationObserver(s) for s in activation_sites(model.config)}

    def hook(site, activation):
        observers[site].update(activation)

    for start in range(0, len(xs), batch_size):
        forward_batch(model, xs[start : start + batch_size], site_hook=hook)
    return observers


def quantize_weight(arr: np.ndarray) -> QTensor:
    """Symmetric int8: per output channel for matrices, per tensor for vectors.

    Output channels are the last axis of a stored matrix (and the first axis
    of the conv kernel, which is flattened channel-last before use).
    """
    if arr.ndim >= 2:
        if arr.ndim == 3:  # conv kernel [O, C, k]: channel axis 0
            flat = arr.reshape(arr.shape[0], -1)
            absmax = np.maximum(np.abs(flat).max(axis=1), _SCALE_FLOOR)
            return quantize_linear(arr, absmax / 127.0, 0, channel_axis=0)
        absmax = np.maximum(np.abs(arr).max(axis=0), _SCALE_FLOOR)
        return quantize_linear(arr, absmax / 127.0, 0, channel_axis=1)
    scale = max(float(np.abs(arr).max()), _SCALE_FLOOR) / 127.0
    return quantize_linear(arr, scale, 0)


@dataclass
class QuantizedModel:
    config: ModelConfig
    weights: dict[str, QTensor]
    mode: str                                   # static | dynamic
    act_qparams: dict[str, tuple[float, int]] | None = None

    def dequantized_param(self, name: str) -> np.ndarray:
        return dequantize_linear(self.weights[name])


def quantize_static(
    model: TransformerModel,
    observers: dict[str, CalibrationObserver],
) -> QuantizedModel:
    """Freeze int8 weights and calibrated activation ranges for inference.

    Observed ranges are extended to include zero before deriving the affine
    parameters; otherwise the zero point clamps and the range cannot be
    represented at all.
    """
    act_qparams = {}
    for site in activation_sites(model.config):
        obs = observers.get(site)
        if obs is None or not obs.valid:
            raise CalibrationError(f"no valid calibration for site {site!r}")
        act_qparams[site] = scale_zero_point(
            min(obs.min_val, 0.0), max(obs.max_val, 0.0), "affine"
        )
    weights = {name: quantize_weight(arr) for name, arr in model.params.items()}
    return QuantizedModel(
        config=model.config, weights=weights, mode="static", act_qparams=act_qparams
    )


def quantize_dynamic(model: TransformerModel) -> QuantizedModel:
    """Int8 weights only; activation scales are computed at call time."""
    weights = {name: quantize_weight(arr) for name, arr in model.params.items()}
    return QuantizedModel(config=model.config, weights=weights, mode="dynamic")


def _dynamic_qparams(x: np.ndarray) -> tuple[float, int]:
    scale = max(float(np.abs(x).max()), _SCALE_FLOOR) / 127.0
    return scale, 0


def quantized_forward_batch(qmodel: QuantizedModel, xs: np.ndarray) -> np.ndarray:
    """Int8 inference for a [B, C, T] batch.

    Every weight-bearing matmul quantizes its input (calibrated affine map in
    static mode, per-call symmetric scale in dynamic mode), runs int8_matmul,
    and dequantizes; the float bias is added afterwards. Attention scores,
    softmax, norms, pooling, and residual adds stay in float.
    """
    cfg = qmodel.config
    w = qmodel.weights

    def qparams(site, activation):
        if qmodel.mode == "static":
            return qmodel.act_qparams[site]
        return _dynamic_qparams(activation)

    def qmm(site, activation, weight_name):
        flat = activation.reshape(-1, activation.shape[-1])
        scale, zp = qparams(site, activation)
        q = quantize_linear(flat, scale, zp)
        out = int8_matmul(q, w[weight_name])
        return out.reshape(*activation.shape[:-1], -1)

    def param(name):
        return dequantize_linear(w[name])

    b = xs.shape[0]
    cols = im2col_batch(xs, cfg.patch_size, cfg.patch_stride)
    wq_conv = w["patch_embed.weight"]
    # conv kernel was quantized per output channel on axis 0; as a matmul the
    # channel axis becomes the column axis
    conv2d = QTensor(
        np.ascontiguousarray(wq_conv.data.reshape(wq_conv.data.shape[0], -1).T),
        wq_conv.scale,
        0,
        channel_axis=1,
    )
    scale, zp = qparams("embed.in", cols)
    q_cols = quantize_linear(cols.reshape(-1, cols.shape[-1]), scale, zp)
    h = int8_matmul(q_cols, conv2d).reshape(b, cfg.num_patches, cfg.model_dim)
    h = h + param("patch_embed.bias")
    h = h + positional_encoding(cfg.num_patches, cfg.model_dim)

    for l in range(cfg.num_layers):
        pre = f"layers.{l}."
        heads = cfg.heads_at(l)
        n1 = layer_norm(h, param(pre + "norm1.gamma"), param(pre + "norm1.beta"))
        site = f"layers.{l}.attn.qkv.in"
        q = _split_heads(qmm(site, n1, pre + "attn.wq") + param(pre + "attn.bq"), heads)
        k = _split_heads(qmm(site, n1, pre + "attn.wk") + param(pre + "attn.bk"), heads)
        v = _split_heads(qmm(site, n1, pre + "attn.wv") + param(pre + "attn.bv"), heads)
        weights_f = softmax(
            np.matmul(q, k.swapaxes(-1, -2)) / math.sqrt(q.shape[-1]), axis=-1
        )
        ctx = _merge_heads(np.matmul(weights_f, v))
        attn = qmm(f"layers.{l}.attn.proj.in", ctx, pre + "attn.wo") + param(pre + "attn.bo")
        h = h + attn

        n2 = layer_norm(h, param(pre + "norm2.gamma"), param(pre + "norm2.beta"))
        mid = relu(qmm(f"layers.{l}.ffn.in", n2, pre + "ffn.w1") + param(pre + "ffn.b1"))
        ffn = qmm(f"layers.{l}.ffn.mid.in", mid, pre + "ffn.w2") + param(pre + "ffn.b2")
        h = h + ffn

    pooled = h.mean(axis=1)
    logits = qmm("classifier.in", pooled, "classifier.weight") + param("classifier.bias")
    return logits


def quantized_forward(qmodel: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Logits [K] for a single [C, T] instance."""
    return quantized_forward_batch(qmodel, x[None])[0]


def quantize_dynamic_forward(qmodel: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Dynamic-PTQ inference; the model must have been built without observers."""
    if qmodel.mode != "dynamic":
        raise InputError("model was not quantized in dynamic mode")
    return quantized_forward(qmodel, x)


def fake_quant(x: np.ndarray, scale, zero_point: int = 0, channel_axis=None) -> np.ndarray:
    """Quantize-then-dequantize in float, simulating int8 rounding/clamping."""
    return dequantize_linear(quantize_linear(x, scale, zero_point, channel_axis))


def fake_quant_ste_mask(x: np.ndarray, scale, zero_point: int = 0) -> np.ndarray:
    """Straight-through gradient mask: 1 inside the representable range, 0 clamped."""
    q = round_half_away(np.asarray(x, dtype=np.float64) / np.asarray(scale)) + zero_point
    return ((q >= INT8_MIN) & (q <= INT8_MAX)).astype(np.float32)


def fake_quant_weight(arr: np.ndarray) -> np.ndarray:
    """Weight-space fake quantization with the same scheme as quantize_weight."""
    return dequantize_linear(quantize_weight(arr)).astype(arr.dtype)


def quantized_energy_estimate(energy_float32_j: float, q_factor: float = 4.0) -> float:
    """Idealized post-quantization energy: E_float32 / Q."""
    if energy_float32_j < 0:
        raise InputError("energy must be nonnegative")
    if q_factor <= 0:
        raise InputError(f"quantization factor must be positive, got {q_factor}")
    return energy_float32_j / q_factor


def payload_bytes(model) -> int:
    """Parameter payload bytes as serialized (4 per f32 element, 1 per int8).

    Prune masks are auxiliary file content, not parameters, and are excluded;
    an unstructured-pruned model therefore reports the same payload as its
    dense baseline.
    """
    if isinstance(model, QuantizedModel):
        return sum(q.data.nbytes for q in model.weights.values())
    return sum(arr.size * 4 for arr in model.params.values())


def scale_table_bytes(model) -> int:
    """Bytes of quantization metadata, counted at 4 bytes per scale entry."""
    if not isinstance(model, QuantizedModel):
        return 0
    total = 0
    for q in model.weights.values():
        total += 4 * (q.scale.size if q.scale.ndim else 1)
        total += 4  # zero point
    if model.act_qparams:
        total += 8 * len(model.act_qparams)
    return total


def quantized_memory(model) -> int:
    """Exact serialized payload bytes: tensor data plus scale tables."""
    return payload_bytes(model) + scale_table_bytes(model)
