"""Magnitude pruning: scoring, mask-based sparsification, structured removal.

Prunable pools are the attention projection matrices, the feed-forward
matrices, and the patch-embedding convolution weight. Biases, norm
parameters, the positional table, and the classifier are excluded: they are
tiny and removing them hurts far more than the parameters saved.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, PruneSpecError
from .model import TransformerModel, count_flops, count_params

PRUNABLE_SUFFIXES = (".wq", ".wk", ".wv", ".wo", ".w1", ".w2", "patch_embed.weight")


@dataclass(frozen=True)
class PruneSpec:
    method: str = "l1"            # l1 | l2
    granularity: str = "weight"   # weight | neuron | head
    scope: str = "global"         # global | layerwise
    sparsity: float = 0.0
    layers: tuple[int, ...] | None = None   # optional layer filter

    def __post_init__(self):
        if self.method not in ("l1", "l2"):
            raise PruneSpecError(f"unknown method {self.method!r}")
        if self.granularity not in ("weight", "neuron", "head"):
            raise PruneSpecError(f"unknown granularity {self.granularity!r}")
        if self.scope not in ("global", "layerwise"):
            raise PruneSpecError(f"unknown scope {self.scope!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise PruneSpecError(f"sparsity must be in [0, 1), got {self.sparsity}")


@dataclass
class PruneReport:
    achieved_sparsity: float
    params_removed: int
    flops_before: int
    flops_after: int
    energy_before_j: float
    energy_after_j: float
    transform_seconds: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def prunable_pools(model: TransformerModel) -> list[str]:
    """Names of the weight tensors that participate in pruning."""
    return [n for n in model.params if n.endswith(PRUNABLE_SUFFIXES)]


def _selected_layers(model: TransformerModel, spec: PruneSpec) -> list[int]:
    layers = range(model.config.num_layers)
    if spec.layers is not None:
        layers = [l for l in layers if l in spec.layers]
    return list(layers)


def score_weights(model: TransformerModel, method: str = "l1") -> dict[str, np.ndarray]:
    """Per-scalar magnitude scores for every prunable tensor, flattened.

    For a single weight the L1 and L2 norms are both its absolute value, so
    the two methods rank identically at weight granularity.
    """
    if method not in ("l1", "l2"):
        raise PruneSpecError(f"unknown method {method!r}")
    return {n: np.abs(model.params[n]).ravel() for n in prunable_pools(model)}


def score_weights_l1(model: TransformerModel) -> dict[str, np.ndarray]:
    return score_weights(model, "l1")


def score_units(
    model: TransformerModel,
    granularity: str,
    method: str = "l2",
    layers: list[int] | None = None,
) -> dict[str, np.ndarray]:
    """Per-unit scores: one value per FFN neuron or attention head.

    A neuron's group is its incoming column of w1 plus its outgoing row of
    w2; a head's group is its slice of the four projection matrices. Scores
    are the L2 (or L1) norm of the group.
    """
    if granularity not in ("neuron", "head"):
        raise PruneSpecError(f"unit scoring needs neuron or head, got {granularity!r}")
    norm = (lambda g: float(np.sqrt(np.sum(g**2)))) if method == "l2" else (
        lambda g: float(np.sum(np.abs(g)))
    )
    cfg = model.config
    layer_ids = layers if layers is not None else range(cfg.num_layers)
    scores: dict[str, np.ndarray] = {}
    for l in layer_ids:
        pre = f"layers.{l}."
        if granularity == "neuron":
            w1 = model.params[pre + "ffn.w1"]
            w2 = model.params[pre + "ffn.w2"]
            scores[pre + "ffn"] = np.array(
                [norm(np.concatenate([w1[:, j], w2[j, :]])) for j in range(w1.shape[1])],
                dtype=np.float64,
            )
        else:
            dh = cfg.head_dim
            wq = model.params[pre + "attn.wq"]
            wk = model.params[pre + "attn.wk"]
            wv = model.params[pre + "attn.wv"]
            wo = model.params[pre + "attn.wo"]
            vals = []
            for h in range(cfg.heads_at(l)):
                sl = slice(h * dh, (h + 1) * dh)
                group = np.concatenate(
                    [wq[:, sl].ravel(), wk[:, sl].ravel(), wv[:, sl].ravel(), wo[sl, :].ravel()]
                )
                vals.append(norm(group))
            scores[pre + "attn"] = np.array(vals, dtype=np.float64)
    return scores


def score_units_l2(model: TransformerModel, granularity: str) -> dict[str, np.ndarray]:
    return score_units(model, granularity, "l2")


def select_prune_set(
    scores: dict[str, np.ndarray],
    spec: PruneSpec,
) -> dict[str, np.ndarray]:
    """Indices of the lowest-scoring entries to prune.

    Global scope ranks all pools together and takes the lowest
    ceil(p * total); layerwise takes ceil(p * n) from each pool. Ties break
    by ascending (pool order, flat index), which makes selection
    deterministic.
    """
    if not scores or any(len(v) == 0 for v in scores.values()):
        raise PruneSpecError("cannot select from an empty pool")
    p = spec.sparsity
    if p == 0.0:
        return {name: np.array([], dtype=np.int64) for name in scores}

    if spec.scope == "layerwise":
        out = {}
        for name, vals in scores.items():
            k = int(np.ceil(p * len(vals)))
            order = np.lexsort((np.arange(len(vals)), vals))
            out[name] = np.sort(order[:k])
        return out

    names = list(scores)
    all_scores = np.concatenate([scores[n] for n in names])
    pool_idx = np.concatenate(
        [np.full(len(scores[n]), i, dtype=np.int64) for i, n in enumerate(names)]
    )
    flat_idx = np.concatenate([np.arange(len(scores[n]), dtype=np.int64) for n in names])
    k = int(np.ceil(p * len(all_scores)))
    order = np.lexsort((flat_idx, pool_idx, all_scores))
    chosen = order[:k]
    out = {}
    for i, name in enumerate(names):
        mine = chosen[pool_idx[chosen] == i]
        out[name] = np.sort(flat_idx[mine])
    return out


def apply_unstructured_mask(
    model: TransformerModel,
    indices: dict[str, np.ndarray],
) -> tuple[TransformerModel, dict[str, np.ndarray]]:
    """Zero the selected weights and record a keep-mask for fine-tuning.

    Shapes are untouched; the masks (1 = keep, 0 = pruned) are stored on the
    model and returned. Masks accumulate across repeated calls.
    """
    masks = model.masks if model.masks is not None else {}
    for name, idx in indices.items():
        if name not in model.params:
            raise InputError(f"unknown parameter {name!r}")
        arr = model.params[name]
        if len(idx) and (idx.min() < 0 or idx.max() >= arr.size):
            raise InputError(f"prune index out of range for {name}")
        mask = masks.get(name, np.ones(arr.shape, dtype=np.float32))
        flat = mask.ravel()
        flat[idx] = 0.0
        masks[name] = flat.reshape(arr.shape)
        arr *= masks[name]
    model.masks = masks
    return model, masks


def prune_unstructured(
    model: TransformerModel,
    spec: PruneSpec,
    baseline_energy_j: float = 1.0,
) -> tuple[TransformerModel, dict[str, np.ndarray], PruneReport]:
    """Magnitude-mask pruning at the requested sparsity; shapes unchanged."""
    start = time.perf_counter()
    scores = score_weights(model, spec.method)
    if spec.layers is not None:
        keep = {f"layers.{l}." for l in spec.layers}
        scores = {n: v for n, v in scores.items() if any(n.startswith(k) for k in keep)}
    indices = select_prune_set(scores, spec)
    params_before = count_params(model.config)
    model, masks = apply_unstructured_mask(model, indices)
    removed = int(sum(len(i) for i in indices.values()))
    report = PruneReport(
        achieved_sparsity=sparsity(model),
        params_removed=removed,
        flops_before=count_flops(model.config),
        flops_after=count_flops(model.config),
        energy_before_j=baseline_energy_j,
        energy_after_j=pruned_energy_estimate(
            baseline_energy_j, removed / params_before
        ),
        transform_seconds=time.perf_counter() - start,
    )
    return model, masks, report


def prune_structured(
    model: TransformerModel,
    spec: PruneSpec,
    baseline_energy_j: float = 1.0,
) -> tuple[TransformerModel, PruneReport]:
    """Physically remove the lowest-scoring FFN neurons or attention heads.

    The returned model is new and smaller; its config carries per-layer unit
    counts so parameter and FLOP accounting stay exact.
    """
    if spec.granularity not in ("neuron", "head"):
        raise PruneSpecError("structured pruning needs neuron or head granularity")
    start = time.perf_counter()
    cfg = model.config
    layer_ids = _selected_layers(model, spec)
    scores = score_units(model, spec.granularity, spec.method, layer_ids)
    indices = select_prune_set(scores, spec)

    for name, idx in indices.items():
        if len(idx) >= len(scores[name]):
            raise PruneSpecError(f"refusing to remove every unit in {name}")

    flops_before = count_flops(cfg)
    params_before = count_params(cfg)
    new_params = {k: v.copy() for k, v in model.params.items()}

    if spec.granularity == "neuron":
        ffn_dims = [cfg.ffn_at(l) for l in range(cfg.num_layers)]
        for l in layer_ids:
            idx = indices[f"layers.{l}.ffn"]
            if len(idx) == 0:
                continue
            keep = np.setdiff1d(np.arange(ffn_dims[l]), idx)
            pre = f"layers.{l}.ffn."
            new_params[pre + "w1"] = new_params[pre + "w1"][:, keep]
            new_params[pre + "b1"] = new_params[pre + "b1"][keep]
            new_params[pre + "w2"] = new_params[pre + "w2"][keep, :]
            ffn_dims[l] = len(keep)
        new_cfg = replace(cfg, ffn_per_layer=tuple(ffn_dims))
    else:
        dh = cfg.head_dim
        head_counts = [cfg.heads_at(l) for l in range(cfg.num_layers)]
        for l in layer_ids:
            idx = indices[f"layers.{l}.attn"]
            if len(idx) == 0:
                continue
            keep_heads = np.setdiff1d(np.arange(head_counts[l]), idx)
            cols = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in keep_heads])
            pre = f"layers.{l}.attn."
            for w, bias in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
                new_params[pre + w] = new_params[pre + w][:, cols]
                new_params[pre + bias] = new_params[pre + bias][cols]
            new_params[pre + "wo"] = new_params[pre + "wo"][cols, :]
            head_counts[l] = len(keep_heads)
        new_cfg = replace(cfg, heads_per_layer=tuple(head_counts))

    # masks describe the old shapes; structured removal invalidates them
    new_model = TransformerModel(config=new_cfg, params=new_params, masks=None)
    params_after = count_params(new_cfg)
    removed = params_before - params_after
    report = PruneReport(
        achieved_sparsity=removed / params_before,
        params_removed=removed,
        flops_before=flops_before,
        flops_after=count_flops(new_cfg),
        energy_before_j=baseline_energy_j,
        energy_after_j=pruned_energy_estimate(baseline_energy_j, removed / params_before),
        transform_seconds=time.perf_counter() - start,
    )
    return new_model, report


def pruned_energy_estimate(energy_j: float, p: float) -> float:
    """Energy after removing a fraction p of parameters: E * (1 - p)."""
    if energy_j < 0:
        raise InputError("energy must be nonnegative")
    if not 0.0 <= p < 1.0:
        raise InputError(f"p must be in [0, 1), got {p}")
    return energy_j * (1.0 - p)


def sparsity(model: TransformerModel) -> float:
    """Fraction of exactly-zero weights across the prunable pools."""
    total = 0
    zeros = 0
    for name in prunable_pools(model):
        arr = model.params[name]
        total += arr.size
        zeros += arr.size - np.count_nonzero(arr)
    return zeros / total
