"""Loss, hand-derived gradients, Adam with cosine annealing, training loops.

The backward pass is written out by hand against the forward graph in
``model.py`` (conv patch embedding, positional add, pre-norm attention and
feed-forward blocks with residuals, mean pooling, linear classifier). Every
gradient is checked against central finite differences in the test suite.

Training is deterministic for a fixed seed: batch shuffling and dropout masks
come from one seeded generator, and reductions run in a fixed order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .model import (
    TransformerModel,
    _merge_heads,
    _split_heads,
    forward_batch,
    positional_encoding,
)
from .tensor import im2col_batch, relu, seeded_rng, softmax


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Negative log-likelihood of ``label`` under softmax(logits)."""
    k = logits.shape[-1]
    if not 0 <= label < k:
        raise InputError(f"label {label} out of range for {k} classes")
    return float(-log_softmax(logits)[label])


def cross_entropy_grad(logits: np.ndarray, label: int) -> np.ndarray:
    """d loss / d logits = softmax(logits) - onehot(label)."""
    k = logits.shape[-1]
    if not 0 <= label < k:
        raise InputError(f"label {label} out of range for {k} classes")
    g = softmax(logits)
    g[label] -= 1.0
    return g


def _batch_ce(logits: np.ndarray, labels: np.ndarray):
    """Mean loss, upstream gradient (already divided by B), correct count."""
    b, k = logits.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise InputError("label out of range")
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(b), labels]))
    grad = softmax(logits)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    correct = int(np.sum(np.argmax(logits, axis=1) == labels))
    return loss, grad, correct


def _layer_norm_cache(x, gamma, beta, eps=1e-5):
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, xhat, inv_std


def _layer_norm_backward(d_out, xhat, inv_std, gamma):
    d_gamma = np.sum(d_out * xhat, axis=tuple(range(d_out.ndim - 1)))
    d_beta = np.sum(d_out, axis=tuple(range(d_out.ndim - 1)))
    d_xhat = d_out * gamma
    m1 = np.mean(d_xhat, axis=-1, keepdims=True)
    m2 = np.mean(d_xhat * xhat, axis=-1, keepdims=True)
    d_x = inv_std * (d_xhat - m1 - xhat * m2)
    return d_x, d_gamma, d_beta


def loss_and_grads(
    model: TransformerModel,
    xs: np.ndarray,
    ys: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Forward with caching, then exact reverse-mode gradients.

    Returns (mean loss, correct count, gradient dict keyed like params).
    Dropout masks are drawn once in the forward pass and reused in the
    backward pass, so the gradients are exact for the sampled network.
    """
    cfg = model.config
    p = model.params
    if xs.ndim != 3 or xs.shape[1] != cfg.in_channels or xs.shape[2] != cfg.seq_len:
        raise ShapeError(f"batch shape {xs.shape} does not match config")
    use_dropout = train and cfg.dropout > 0.0
    if use_dropout and rng is None:
        raise InputError("train-mode gradients with dropout need an rng")
    b = xs.shape[0]
    num_patches = cfg.num_patches

    def make_mask(shape, dtype):
        if not use_dropout:
            return None
        keep = 1.0 - cfg.dropout
        return (rng.random(shape) < keep).astype(dtype) / keep

    # ---- forward with cache ----
    cols = im2col_batch(xs, cfg.patch_size, cfg.patch_stride)
    w2d = p["patch_embed.weight"].reshape(cfg.model_dim, -1).T
    h = cols @ w2d + p["patch_embed.bias"]
    h = h + positional_encoding(num_patches, cfg.model_dim).astype(h.dtype)

    caches = []
    for l in range(cfg.num_layers):
        pre = f"layers.{l}."
        heads = cfg.heads_at(l)
        n1, n1hat, inv1 = _layer_norm_cache(h, p[pre + "norm1.gamma"], p[pre + "norm1.beta"])
        qh = _split_heads(n1 @ p[pre + "attn.wq"] + p[pre + "attn.bq"], heads)
        kh = _split_heads(n1 @ p[pre + "attn.wk"] + p[pre + "attn.bk"], heads)
        vh = _split_heads(n1 @ p[pre + "attn.wv"] + p[pre + "attn.bv"], heads)
        alpha = 1.0 / math.sqrt(qh.shape[-1])
        attn_w = softmax(np.matmul(qh, kh.swapaxes(-1, -2)) * alpha, axis=-1)
        ctx = _merge_heads(np.matmul(attn_w, vh))
        attn_out = ctx @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
        mask1 = make_mask(attn_out.shape, attn_out.dtype)
        h_mid = h + (attn_out * mask1 if mask1 is not None else attn_out)

        n2, n2hat, inv2 = _layer_norm_cache(h_mid, p[pre + "norm2.gamma"], p[pre + "norm2.beta"])
        z1 = n2 @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
        r = relu(z1)
        z2 = r @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        mask2 = make_mask(z2.shape, z2.dtype)
        h_out = h_mid + (z2 * mask2 if mask2 is not None else z2)

        caches.append(
            dict(h_in=h, n1=n1, n1hat=n1hat, inv1=inv1, qh=qh, kh=kh, vh=vh,
                 alpha=alpha, attn_w=attn_w, ctx=ctx, mask1=mask1,
                 h_mid=h_mid, n2=n2, n2hat=n2hat, inv2=inv2, z1=z1, r=r,
                 mask2=mask2, heads=heads)
        )
        h = h_out

    pooled = h.mean(axis=1)
    logits = pooled @ p["classifier.weight"] + p["classifier.bias"]
    loss, d_logits, correct = _batch_ce(logits, ys)

    # ---- backward ----
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    grads["classifier.weight"] = pooled.T @ d_logits
    grads["classifier.bias"] = d_logits.sum(axis=0)
    d_pooled = d_logits @ p["classifier.weight"].T
    d_h = np.repeat(d_pooled[:, None, :], num_patches, axis=1) / num_patches

    for l in reversed(range(cfg.num_layers)):
        pre = f"layers.{l}."
        c = caches[l]

        d_z2 = d_h * c["mask2"] if c["mask2"] is not None else d_h
        grads[pre + "ffn.w2"] = np.einsum("bpf,bpd->fd", c["r"], d_z2)
        grads[pre + "ffn.b2"] = d_z2.sum(axis=(0, 1))
        d_r = d_z2 @ p[pre + "ffn.w2"].T
        d_z1 = d_r * (c["z1"] > 0)
        grads[pre + "ffn.w1"] = np.einsum("bpd,bpf->df", c["n2"], d_z1)
        grads[pre + "ffn.b1"] = d_z1.sum(axis=(0, 1))
        d_n2 = d_z1 @ p[pre + "ffn.w1"].T
        d_hmid_ln, d_g2, d_b2 = _layer_norm_backward(
            d_n2, c["n2hat"], c["inv2"], p[pre + "norm2.gamma"]
        )
        grads[pre + "norm2.gamma"] = d_g2
        grads[pre + "norm2.beta"] = d_b2
        d_hmid = d_h + d_hmid_ln

        d_attn = d_hmid * c["mask1"] if c["mask1"] is not None else d_hmid
        grads[pre + "attn.wo"] = np.einsum("bpa,bpd->ad", c["ctx"], d_attn)
        grads[pre + "attn.bo"] = d_attn.sum(axis=(0, 1))
        d_ctx = _split_heads(d_attn @ p[pre + "attn.wo"].T, c["heads"])
        d_attn_w = np.matmul(d_ctx, c["vh"].swapaxes(-1, -2))
        d_vh = np.matmul(c["attn_w"].swapaxes(-1, -2), d_ctx)
        # softmax backward per attention row
        d_scores = c["attn_w"] * (
            d_attn_w - np.sum(d_attn_w * c["attn_w"], axis=-1, keepdims=True)
        )
        d_qh = np.matmul(d_scores, c["kh"]) * c["alpha"]
        d_kh = np.matmul(d_scores.swapaxes(-1, -2), c["qh"]) * c["alpha"]
        d_q = _merge_heads(d_qh)
        d_k = _merge_heads(d_kh)
        d_v = _merge_heads(d_vh)
        n1 = c["n1"]
        grads[pre + "attn.wq"] = np.einsum("bpd,bpa->da", n1, d_q)
        grads[pre + "attn.bq"] = d_q.sum(axis=(0, 1))
        grads[pre + "attn.wk"] = np.einsum("bpd,bpa->da", n1, d_k)
        grads[pre + "attn.bk"] = d_k.sum(axis=(0, 1))
        grads[pre + "attn.wv"] = np.einsum("bpd,bpa->da", n1, d_v)
        grads[pre + "attn.bv"] = d_v.sum(axis=(0, 1))
        d_n1 = (
            d_q @ p[pre + "attn.wq"].T
            + d_k @ p[pre + "attn.wk"].T
            + d_v @ p[pre + "attn.wv"].T
        )
        d_hin_ln, d_g1, d_b1 = _layer_norm_backward(
            d_n1, c["n1hat"], c["inv1"], p[pre + "norm1.gamma"]
        )
        grads[pre + "norm1.gamma"] = d_g1
        grads[pre + "norm1.beta"] = d_b1
        d_h = d_hmid + d_hin_ln

    d_w2d = np.einsum("bpc,bpd->cd", cols, d_h)   # [C*k, d]
    grads["patch_embed.weight"] = d_w2d.T.reshape(p["patch_embed.weight"].shape)
    grads["patch_embed.bias"] = d_h.sum(axis=(0, 1))
    return loss, correct, grads


def backward(
    model: TransformerModel,
    batch: tuple[np.ndarray, np.ndarray],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> dict[str, np.ndarray]:
    """Gradient of the mean batch loss for every parameter tensor."""
    xs, ys = batch
    _, _, grads = loss_and_grads(model, xs, np.asarray(ys), train=train, rng=rng)
    return grads


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 1e-3


def init_adam(
    params: dict[str, np.ndarray],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    base_lr: float = 1e-3,
) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        base_lr=base_lr,
    )


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr_t: float | None = None,
):
    """Bias-corrected Adam update, in place. Returns (params, state)."""
    if lr_t is None:
        lr_t = state.base_lr
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float
    lr_min: float
    total_steps: int

    def __post_init__(self):
        if not (self.lr_max >= self.lr_min > 0):
            raise InputError("need lr_max >= lr_min > 0")
        if self.total_steps < 1:
            raise InputError("total_steps must be >= 1")


def cosine_lr(schedule: CosineSchedule, t: int) -> float:
    """Cosine annealing from lr_max at t=0 to lr_min at t=total_steps."""
    if not 0 <= t <= schedule.total_steps:
        raise InputError(f"step {t} outside [0, {schedule.total_steps}]")
    span = schedule.lr_max - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * t / schedule.total_steps))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0


_WEIGHT_MATRIX_SUFFIXES = (".wq", ".wk", ".wv", ".wo", ".w1", ".w2", ".weight")


def train(
    model: TransformerModel,
    dataset,
    cfg: TrainConfig,
    val_dataset=None,
    mask: dict[str, np.ndarray] | None = None,
    weight_fake_quant: bool = False,
) -> tuple[TransformerModel, list[dict]]:
    """Mini-batch training loop.

    Each step: shuffled batch -> loss_and_grads -> global-norm clip -> Adam
    with a cosine-annealed learning rate over the full step budget. When
    ``mask`` is given it is re-applied after every optimizer step so pruned
    coordinates stay exactly zero. When ``weight_fake_quant`` is set, each
    forward/backward runs on fake-quantized weight matrices while updates are
    applied to the float master weights (straight-through estimator; the
    symmetric scale covers the full range so no value is ever clamped).

    Returns the model and a per-epoch history (epoch, lr, train_loss,
    train_acc, val_acc).
    """
    n = len(dataset.instances)
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    if mask is not None:
        _apply_mask(model.params, mask)
    rng = seeded_rng(cfg.seed)
    batches_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    schedule = CosineSchedule(cfg.lr_max, cfg.lr_min, max(1, cfg.epochs * batches_per_epoch))
    state = init_adam(model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.lr_max)
    xs_all = dataset.instances
    ys_all = dataset.labels

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xs = xs_all[idx]
            ys = ys_all[idx]
            if weight_fake_quant:
                saved = _swap_in_fake_quant_weights(model.params)
                try:
                    loss, _, grads = loss_and_grads(model, xs, ys, train=True, rng=rng)
                finally:
                    model.params.update(saved)
            else:
                loss, _, grads = loss_and_grads(model, xs, ys, train=True, rng=rng)
            epoch_loss += loss * len(idx)
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(state, model.params, grads, cosine_lr(schedule, step))
            if mask is not None:
                _apply_mask(model.params, mask)
            step += 1
        lr_now = cosine_lr(schedule, min(step, schedule.total_steps))
        row = {
            "epoch": epoch + 1,
            "lr": lr_now,
            "train_loss": epoch_loss / n,
            "train_acc": evaluate(model, dataset),
            "val_acc": evaluate(model, val_dataset) if val_dataset is not None else "",
        }
        history.append(row)
    return model, history


def _apply_mask(params: dict[str, np.ndarray], mask: dict[str, np.ndarray]):
    for name, m in mask.items():
        if name not in params or m.shape != params[name].shape:
            raise InputError(f"mask shape mismatch for {name}")
        params[name] *= m.astype(params[name].dtype)


def _swap_in_fake_quant_weights(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Replace weight matrices by their fake-quantized version; return originals."""
    from .quantization import fake_quant_weight

    saved = {}
    for name, arr in params.items():
        if arr.ndim >= 2 and name.endswith(_WEIGHT_MATRIX_SUFFIXES):
            saved[name] = arr
            params[name] = fake_quant_weight(arr)
    return saved


def fine_tune(
    model: TransformerModel,
    masks: dict[str, np.ndarray],
    dataset,
    epochs: int,
    cfg: TrainConfig | None = None,
    val_dataset=None,
) -> TransformerModel:
    """Recovery training that keeps the pruned coordinates at exactly zero."""
    if epochs == 0:
        return model
    base = cfg if cfg is not None else TrainConfig(lr_max=3e-4)
    ft_cfg = TrainConfig(
        epochs=epochs,
        batch_size=base.batch_size,
        lr_max=base.lr_max,
        lr_min=base.lr_min,
        beta1=base.beta1,
        beta2=base.beta2,
        eps=base.eps,
        clip_norm=base.clip_norm,
        seed=base.seed,
    )
    model, _ = train(model, dataset, ft_cfg, val_dataset=val_dataset, mask=masks)
    return model


def evaluate(model: TransformerModel, dataset, batch_size: int = 128) -> float:
    """Eval-mode classification accuracy over a dataset."""
    n = len(dataset.instances)
    if n == 0:
        raise InputError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, n, batch_size):
        xs = dataset.instances[start : start + batch_size]
        logits = forward_batch(model, xs)
        correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[start : start + batch_size]))
    return correct / n


def history_to_csv(history: list[dict], path) -> None:
    """Write the training history in the epoch/lr/loss/accuracy layout."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "lr", "train_loss", "train_acc", "val_acc"]
        )
        writer.writeheader()
        for row in history:
            writer.writerow(row)
