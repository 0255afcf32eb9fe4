"""Dense float and int8 tensor kernels that everything else is built on.

Arrays are plain numpy ndarrays in row-major order; float32 is the working
precision of the public API. Kernels preserve the dtype they are given so
numerical oracles (finite differences, exact references) can run the same
code in float64. All operations are pure functions of their inputs and
bit-deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, InputError, ShapeError

INT8_MIN = -128
INT8_MAX = 127

# K * 127^2 must stay below 2^31 so an int32 accumulator cannot overflow.
MAX_ACCUM_K = (2**31) // (INT8_MAX * INT8_MAX)


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 generator: identical seed, identical stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 arrays."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax: max is subtracted before exponentiation."""
    x = np.asarray(x)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def layer_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalize each feature vector (last axis) to zero mean / unit variance.

    Population variance is used. A constant input row has zero variance and
    maps to beta.
    """
    if eps <= 0:
        raise InputError(f"eps must be positive, got {eps}")
    x = np.asarray(x)
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return gamma * (centered / np.sqrt(var + eps)) + beta


def conv1d_valid(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    stride: int = 1,
) -> np.ndarray:
    """Valid (no padding) 1-D cross-correlation.

    x is [C_in, T], w is [C_out, C_in, k], b is [C_out]; the result is
    [C_out, T'] with T' = floor((T - k) / stride) + 1.
    """
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d_valid expects x[C,T], w[O,C,k]; got {x.shape}, {w.shape}")
    c_in, t = x.shape
    c_out, c_w, k = w.shape
    if c_w != c_in:
        raise ShapeError(f"channel mismatch: x has {c_in}, w has {c_w}")
    if k > t:
        raise ShapeError(f"kernel size {k} exceeds series length {t}")
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    cols = im2col(x, k, stride)                      # [T', C*k]
    out = cols @ w.reshape(c_out, c_in * k).T + b    # [T', C_out]
    return np.ascontiguousarray(out.T)


def im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Unfold [C, T] into the [T', C*k] patch matrix used by conv1d_valid."""
    c, t = x.shape
    n = (t - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride]
    # windows is [C, T', k]; flatten per patch in (channel, offset) order
    return np.ascontiguousarray(windows.transpose(1, 0, 2).reshape(n, c * k))


def im2col_batch(xs: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Unfold [B, C, T] into [B, T', C*k] in one strided pass."""
    b, c, t = xs.shape
    n = (t - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xs, k, axis=2)[:, :, ::stride]
    return np.ascontiguousarray(windows.transpose(0, 2, 1, 3).reshape(b, n, c * k))


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero (not banker's)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QTensor:
    """Signed 8-bit payload plus the affine map back to real values.

    ``scale`` is either a positive scalar (per-tensor) or a positive vector
    along ``channel_axis`` (per-channel). ``zero_point`` is a per-tensor
    integer in [-128, 127]; per-channel quantization is always symmetric
    (zero_point 0).
    """

    data: np.ndarray
    scale: np.ndarray
    zero_point: int = 0
    channel_axis: int | None = None

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise InputError(f"QTensor payload must be int8, got {self.data.dtype}")
        scale = np.asarray(self.scale, dtype=np.float32)
        object.__setattr__(self, "scale", scale)
        if np.any(scale <= 0):
            raise InputError("QTensor scale must be positive")
        if not (INT8_MIN <= self.zero_point <= INT8_MAX):
            raise InputError(f"zero_point {self.zero_point} outside int8 range")
        if scale.ndim == 0:
            if self.channel_axis is not None:
                raise InputError("scalar scale cannot carry a channel_axis")
        else:
            if self.channel_axis is None:
                raise InputError("vector scale requires a channel_axis")
            if scale.shape[0] != self.data.shape[self.channel_axis]:
                raise ShapeError(
                    f"per-channel scale length {scale.shape[0]} does not match "
                    f"axis {self.channel_axis} of shape {self.data.shape}"
                )
            if self.zero_point != 0:
                raise InputError("per-channel quantization must be symmetric")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


def _broadcast_scale(q: QTensor) -> np.ndarray:
    if q.scale.ndim == 0:
        return q.scale
    shape = [1] * q.data.ndim
    shape[q.channel_axis] = q.scale.shape[0]
    return q.scale.reshape(shape)


def quantize_linear(
    x: np.ndarray,
    scale,
    zero_point: int = 0,
    channel_axis: int | None = None,
) -> QTensor:
    """Quantize real values to int8: q = clamp(round(x/s) + z, -128, 127).

    Rounding is half-away-from-zero.
    """
    scale = np.asarray(scale, dtype=np.float32)
    if np.any(scale <= 0):
        raise InputError("scale must be positive")
    if scale.ndim > 0 and channel_axis is not None:
        shape = [1] * x.ndim
        shape[channel_axis] = scale.shape[0]
        s = scale.reshape(shape)
    else:
        s = scale
    q = round_half_away(np.asarray(x, dtype=np.float64) / s) + zero_point
    q = np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)
    return QTensor(q, scale, zero_point, channel_axis)


def dequantize_linear(q: QTensor) -> np.ndarray:
    """Inverse affine map: x_hat = (q - zero_point) * scale."""
    s = _broadcast_scale(q)
    return ((q.data.astype(np.float32) - q.zero_point) * s).astype(np.float32)


def int8_matmul(a: QTensor, b: QTensor) -> np.ndarray:
    """Integer matmul of quantized operands, returned in real units.

    Accumulation is exact: products of int8 values are below 2^14, so partial
    sums of up to MAX_ACCUM_K terms are integers well under 2^53 and a float64
    GEMM reproduces int32 accumulation bit-exactly (and much faster than a
    naive integer loop). Zero-point corrections are applied before scaling.

    b may carry a per-output-channel scale (channel_axis == 1).
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("int8_matmul expects rank-2 operands")
    m, k = a.data.shape
    k2, n = b.data.shape
    if k != k2:
        raise ShapeError(f"inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    if k > MAX_ACCUM_K:
        raise CapacityError(
            f"K={k} exceeds the int32 accumulator bound ({MAX_ACCUM_K})"
        )
    if a.channel_axis is not None:
        raise InputError("left operand must be per-tensor quantized")
    if b.channel_axis not in (None, 1):
        raise InputError("right operand scale must be per-tensor or per-column")

    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    acc = a64 @ b64
    if a.zero_point:
        acc -= a.zero_point * b64.sum(axis=0, keepdims=True)
    if b.zero_point:
        acc -= b.zero_point * a64.sum(axis=1, keepdims=True)
    if a.zero_point and b.zero_point:
        acc += k * a.zero_point * b.zero_point

    s_a = float(a.scale)
    s_b = b.scale if b.scale.ndim else float(b.scale)
    return (acc * (s_a * np.asarray(s_b, dtype=np.float64))).astype(np.float32)
