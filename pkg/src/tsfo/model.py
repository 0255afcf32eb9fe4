"""Time-series transformer: patch embedding, encoder stack, classifier.

The architecture is a pre-norm encoder. A strided 1-D convolution turns the
input series into patch vectors, a fixed sinusoidal table adds position
information, and each encoder block applies multi-head self-attention and a
ReLU feed-forward network, both with residual connections. Patch outputs are
mean-pooled before the linear classifier.

Parameters live in a flat ``name -> ndarray`` dict so that gradients, masks,
optimizer state, and serialization can all share one keying scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import conv1d_valid, im2col_batch, layer_norm, relu, seeded_rng, softmax


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    model_dim: int
    ffn_dim: int
    patch_size: int
    patch_stride: int
    seq_len: int
    in_channels: int = 1
    num_classes: int = 2
    dropout: float = 0.1
    # Per-layer overrides produced by structured pruning; None means uniform.
    heads_per_layer: tuple[int, ...] | None = None
    ffn_per_layer: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1:
            raise ConfigError("need at least one layer and one head")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.patch_size > self.seq_len:
            raise ConfigError(
                f"patch_size {self.patch_size} exceeds seq_len {self.seq_len}"
            )
        if self.patch_stride < 1:
            raise ConfigError("patch_stride must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for name, per_layer in (
            ("heads_per_layer", self.heads_per_layer),
            ("ffn_per_layer", self.ffn_per_layer),
        ):
            if per_layer is not None:
                if len(per_layer) != self.num_layers:
                    raise ConfigError(f"{name} must list all {self.num_layers} layers")
                if any(v < 1 for v in per_layer):
                    raise ConfigError(f"{name} entries must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def num_patches(self) -> int:
        return (self.seq_len - self.patch_size) // self.patch_stride + 1

    def heads_at(self, layer: int) -> int:
        return self.heads_per_layer[layer] if self.heads_per_layer else self.num_heads

    def ffn_at(self, layer: int) -> int:
        return self.ffn_per_layer[layer] if self.ffn_per_layer else self.ffn_dim

    def attn_width(self, layer: int) -> int:
        return self.heads_at(layer) * self.head_dim


# Published presets give depth and head counts; the hidden sizes below keep
# the parameter counts in the same order of magnitude and are our choice.
_PRESET_DIMS = {
    "T1": dict(num_layers=8, num_heads=8, model_dim=64, ffn_dim=256),
    "T2": dict(num_layers=12, num_heads=16, model_dim=96, ffn_dim=384),
}


def preset_config(
    name: str,
    seq_len: int,
    num_classes: int,
    in_channels: int = 1,
    patch_size: int = 8,
    patch_stride: int | None = None,
    dropout: float = 0.1,
) -> ModelConfig:
    """Build a T1 or T2 configuration for a concrete dataset shape."""
    if name not in _PRESET_DIMS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESET_DIMS)}")
    return ModelConfig(
        patch_size=patch_size,
        patch_stride=patch_stride if patch_stride is not None else patch_size,
        seq_len=seq_len,
        in_channels=in_channels,
        num_classes=num_classes,
        dropout=dropout,
        **_PRESET_DIMS[name],
    )


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    masks: dict[str, np.ndarray] | None = None

    def copy(self) -> "TransformerModel":
        return TransformerModel(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            masks={k: v.copy() for k, v in self.masks.items()} if self.masks else None,
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every parameter tensor's shape, fully determined by the config."""
    d = config.model_dim
    shapes: dict[str, tuple] = {
        "patch_embed.weight": (d, config.in_channels, config.patch_size),
        "patch_embed.bias": (d,),
    }
    for l in range(config.num_layers):
        a = config.attn_width(l)
        f = config.ffn_at(l)
        p = f"layers.{l}."
        shapes[p + "norm1.gamma"] = (d,)
        shapes[p + "norm1.beta"] = (d,)
        shapes[p + "attn.wq"] = (d, a)
        shapes[p + "attn.bq"] = (a,)
        shapes[p + "attn.wk"] = (d, a)
        shapes[p + "attn.bk"] = (a,)
        shapes[p + "attn.wv"] = (d, a)
        shapes[p + "attn.bv"] = (a,)
        shapes[p + "attn.wo"] = (a, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "norm2.gamma"] = (d,)
        shapes[p + "norm2.beta"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["classifier.weight"] = (d, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def _init_fans(name: str, shape: tuple) -> tuple[int, int]:
    if name == "patch_embed.weight":
        d, c, k = shape
        return c * k, d
    return shape[0], shape[1]


def build_model(config: ModelConfig, rng: np.random.Generator | int) -> TransformerModel:
    """Initialize all weights; deterministic for a fixed seed.

    Weight matrices use scaled uniform init with bound sqrt(6/(fan_in+fan_out));
    biases start at zero, norm gains at one. Tensors are drawn in the fixed
    order of ``param_shapes``, which pins the random stream.
    """
    if isinstance(rng, (int, np.integer)):
        rng = seeded_rng(rng)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith((".beta", ".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in, fan_out = _init_fans(name, shape)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return TransformerModel(config=config, params=params)


@lru_cache(maxsize=64)
def _pe_table(num_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(num_positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.empty((num_positions, dim), dtype=np.float32)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table.setflags(write=False)
    return table


def positional_encoding(num_positions: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even columns, cos on odd columns.

    The table is deterministic, so it is cached; callers get a read-only view.
    """
    if dim % 2 != 0:
        raise ConfigError(f"positional encoding needs an even dim, got {dim}")
    return _pe_table(num_positions, dim)


def patch_embed(model: TransformerModel, x: np.ndarray) -> np.ndarray:
    """Embed a [C, T] series into [P, d] patch vectors via the conv layer."""
    out = conv1d_valid(
        x,
        model.params["patch_embed.weight"],
        model.params["patch_embed.bias"],
        model.config.patch_stride,
    )
    return out.T


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    # [B, P, a] -> [B, H, P, a/H]
    b, p, a = x.shape
    return x.reshape(b, p, num_heads, a // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    # [B, H, P, dh] -> [B, P, H*dh]
    b, h, p, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, p, h * dh)


def multi_head_attention(
    x: np.ndarray,
    wq: np.ndarray,
    bq: np.ndarray,
    wk: np.ndarray,
    bk: np.ndarray,
    wv: np.ndarray,
    bv: np.ndarray,
    wo: np.ndarray,
    bo: np.ndarray,
    num_heads: int,
) -> np.ndarray:
    """Scaled dot-product attention over a [B, P, d] batch."""
    q = _split_heads(x @ wq + bq, num_heads)
    k = _split_heads(x @ wk + bk, num_heads)
    v = _split_heads(x @ wv + bv, num_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = softmax(np.matmul(q, k.swapaxes(-1, -2)) * scale, axis=-1)
    return _merge_heads(np.matmul(weights, v)) @ wo + bo


def attention_forward(model: TransformerModel, layer: int, x: np.ndarray) -> np.ndarray:
    """Run one layer's attention sublayer on [P, d] input (no norm/residual)."""
    if x.ndim != 2 or x.shape[1] != model.config.model_dim:
        raise ShapeError(f"expected [P, {model.config.model_dim}], got {x.shape}")
    p = model.params
    pre = f"layers.{layer}.attn."
    out = multi_head_attention(
        x[None],
        p[pre + "wq"], p[pre + "bq"],
        p[pre + "wk"], p[pre + "bk"],
        p[pre + "wv"], p[pre + "bv"],
        p[pre + "wo"], p[pre + "bo"],
        model.config.heads_at(layer),
    )
    return out[0]


def forward_batch(
    model: TransformerModel,
    xs: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    site_hook=None,
) -> np.ndarray:
    """Logits for a [B, C, T] batch.

    Dropout (inverted scaling) is applied to each sublayer output only when
    ``train`` is true, in which case ``rng`` must be supplied. ``site_hook``,
    when given, receives ``(site_name, activation)`` for the input of every
    weight-bearing matmul; calibration and activation oracles hook in here.
    """
    cfg = model.config
    if xs.ndim != 3 or xs.shape[1] != cfg.in_channels or xs.shape[2] != cfg.seq_len:
        raise ShapeError(
            f"expected batch [B, {cfg.in_channels}, {cfg.seq_len}], got {xs.shape}"
        )
    if train and cfg.dropout > 0 and rng is None:
        raise ConfigError("train-mode forward with dropout needs an rng")
    p = model.params
    b = xs.shape[0]

    cols = im2col_batch(xs, cfg.patch_size, cfg.patch_stride)
    if site_hook:
        site_hook("embed.in", cols)
    w2d = p["patch_embed.weight"].reshape(cfg.model_dim, -1).T
    h = cols @ w2d + p["patch_embed.bias"]
    h = h + positional_encoding(cfg.num_patches, cfg.model_dim)

    def drop(t):
        if not train or cfg.dropout == 0.0:
            return t
        keep = 1.0 - cfg.dropout
        mask = (rng.random(t.shape) < keep).astype(t.dtype) / keep
        return t * mask

    for l in range(cfg.num_layers):
        pre = f"layers.{l}."
        n1 = layer_norm(h, p[pre + "norm1.gamma"], p[pre + "norm1.beta"])
        if site_hook:
            site_hook(f"layers.{l}.attn.qkv.in", n1)
        attn = multi_head_attention(
            n1,
            p[pre + "attn.wq"], p[pre + "attn.bq"],
            p[pre + "attn.wk"], p[pre + "attn.bk"],
            p[pre + "attn.wv"], p[pre + "attn.bv"],
            p[pre + "attn.wo"], p[pre + "attn.bo"],
            cfg.heads_at(l),
        )
        if site_hook:
            # re-derive the out-projection input for observers
            q = _split_heads(n1 @ p[pre + "attn.wq"] + p[pre + "attn.bq"], cfg.heads_at(l))
            k = _split_heads(n1 @ p[pre + "attn.wk"] + p[pre + "attn.bk"], cfg.heads_at(l))
            v = _split_heads(n1 @ p[pre + "attn.wv"] + p[pre + "attn.bv"], cfg.heads_at(l))
            w = softmax(np.matmul(q, k.swapaxes(-1, -2)) / math.sqrt(q.shape[-1]), axis=-1)
            site_hook(f"layers.{l}.attn.proj.in", _merge_heads(np.matmul(w, v)))
        h = h + drop(attn)

        n2 = layer_norm(h, p[pre + "norm2.gamma"], p[pre + "norm2.beta"])
        if site_hook:
            site_hook(f"layers.{l}.ffn.in", n2)
        mid = relu(n2 @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"])
        if site_hook:
            site_hook(f"layers.{l}.ffn.mid.in", mid)
        ffn = mid @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        h = h + drop(ffn)

    pooled = h.mean(axis=1)
    if site_hook:
        site_hook("classifier.in", pooled)
    return pooled @ p["classifier.weight"] + p["classifier.bias"]


def forward(
    model: TransformerModel,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Logits [K] for a single [C, T] instance."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return forward_batch(model, x[None], train=(mode == "train"), rng=rng)[0]


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count; equals the enumerated tensor sizes."""
    d = config.model_dim
    total = d * config.in_channels * config.patch_size + d
    for l in range(config.num_layers):
        a = config.attn_width(l)
        f = config.ffn_at(l)
        total += 3 * (d * a + a) + (a * d + d)   # q, k, v, o projections
        total += 2 * d * f + f + d               # ffn
        total += 4 * d                           # two norm (gamma, beta) pairs
    total += d * config.num_classes + config.num_classes
    return total


def flop_breakdown(config: ModelConfig) -> dict:
    """Per-component FLOP counts for one inference.

    A multiply-accumulate counts as 2 FLOPs. Softmax, normalization, and
    residual adds contribute only scalar ops and are excluded. The
    ``attention_core_per_layer`` entry is the canonical quadratic/linear
    complexity term P^2*d + P*d^2 for reference against the cost model.
    """
    p = config.num_patches
    d = config.model_dim
    embed_macs = p * d * config.in_channels * config.patch_size
    attn_macs = 0
    ffn_macs = 0
    core = []
    for l in range(config.num_layers):
        a = config.attn_width(l)
        f = config.ffn_at(l)
        attn_macs += 4 * p * d * a + 2 * p * p * a
        ffn_macs += 2 * p * d * f
        core.append(p * p * a + p * a * a)
    cls_macs = d * config.num_classes
    return {
        "patch_embed": 2 * embed_macs,
        "attention": 2 * attn_macs,
        "ffn": 2 * ffn_macs,
        "classifier": 2 * cls_macs,
        "attention_core_per_layer": core,
        "total": 2 * (embed_macs + attn_macs + ffn_macs + cls_macs),
    }


def count_flops(config: ModelConfig) -> int:
    """Total FLOPs per inference (see flop_breakdown for the accounting)."""
    return flop_breakdown(config)["total"]
