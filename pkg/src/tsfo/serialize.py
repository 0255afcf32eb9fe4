"""Binary container shared by models, quantized models, and dataset caches.

Layout: magic bytes ``TSFO``, a little-endian u32 format version, a u64
header length, a UTF-8 JSON header, then raw little-endian tensor payloads in
manifest order. The header holds the kind ("model", "quantized_model",
"dataset"), a kind-specific meta block, and the tensor manifest (name,
element type f32|i8|i64, shape, optional scale / zero_point / channel_axis).
Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import TimeSeriesDataset
from .errors import ParseError
from .model import ModelConfig, TransformerModel
from .quantization import QuantizedModel
from .tensor import QTensor

MAGIC = b"TSFO"
VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("<i1"), "i64": np.dtype("<i8")}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


@dataclass
class TensorEntry:
    name: str
    dtype: str
    shape: tuple
    scale: list | float | None = None
    zero_point: int | None = None
    channel_axis: int | None = None

    def to_manifest(self) -> dict:
        entry = {"name": self.name, "dtype": self.dtype, "shape": list(self.shape)}
        if self.scale is not None:
            entry["scale"] = self.scale
            entry["zero_point"] = self.zero_point
            if self.channel_axis is not None:
                entry["channel_axis"] = self.channel_axis
        return entry


def write_container(path, kind: str, meta: dict, tensors: list[tuple]) -> None:
    """Write (name, array, qinfo) tensors; qinfo is None or (scale, zp, axis)."""
    manifest = []
    payloads = []
    for name, arr, qinfo in tensors:
        dtype = _DTYPE_NAMES[np.dtype(arr.dtype).newbyteorder("<")]
        entry = TensorEntry(name=name, dtype=dtype, shape=arr.shape)
        if qinfo is not None:
            scale, zp, axis = qinfo
            entry.scale = scale.tolist() if isinstance(scale, np.ndarray) else float(scale)
            entry.zero_point = int(zp)
            entry.channel_axis = axis
        manifest.append(entry.to_manifest())
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "tensors": manifest}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for payload in payloads:
            fh.write(payload)


def read_container(path) -> tuple[str, dict, dict[str, tuple]]:
    """Return (kind, meta, tensors) where tensors maps name -> (array, qinfo)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ParseError(f"{path}: not a TSFO container (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ParseError(f"{path}: unsupported container version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: bad container header ({exc})") from None
        tensors = {}
        for entry in header["tensors"]:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ParseError(f"{path}: truncated payload for {entry['name']!r}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            qinfo = None
            if "scale" in entry:
                scale = entry["scale"]
                scale = np.asarray(scale, dtype=np.float32) if isinstance(scale, list) else scale
                qinfo = (scale, entry["zero_point"], entry.get("channel_axis"))
            tensors[entry["name"]] = (arr, qinfo)
    return header["kind"], header["meta"], tensors


def _config_to_meta(config: ModelConfig) -> dict:
    meta = dataclasses.asdict(config)
    for key in ("heads_per_layer", "ffn_per_layer"):
        if meta[key] is not None:
            meta[key] = list(meta[key])
    return meta


def _config_from_meta(meta: dict) -> ModelConfig:
    kwargs = dict(meta)
    for key in ("heads_per_layer", "ffn_per_layer"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    return ModelConfig(**kwargs)


def save_model(model: TransformerModel, path) -> None:
    tensors = [(name, arr, None) for name, arr in model.params.items()]
    if model.masks:
        tensors += [
            (f"mask/{name}", m.astype(np.int8), None) for name, m in model.masks.items()
        ]
    write_container(path, "model", {"config": _config_to_meta(model.config)}, tensors)


def save_quantized(qmodel: QuantizedModel, path) -> None:
    meta = {
        "config": _config_to_meta(qmodel.config),
        "mode": qmodel.mode,
        "act_qparams": qmodel.act_qparams,
    }
    tensors = [
        (name, q.data, (q.scale, q.zero_point, q.channel_axis))
        for name, q in qmodel.weights.items()
    ]
    write_container(path, "quantized_model", meta, tensors)


def save_dataset(dataset: TimeSeriesDataset, path) -> None:
    meta = {
        "name": dataset.name,
        "label_map": {str(k): v for k, v in dataset.label_map.items()},
        "subjects": dataset.subjects.tolist() if dataset.subjects is not None else None,
        "predefined_split": (
            [dataset.predefined_split[0].tolist(), dataset.predefined_split[1].tolist()]
            if dataset.predefined_split is not None
            else None
        ),
    }
    tensors = [
        ("instances", dataset.instances.astype(np.float32), None),
        ("labels", dataset.labels.astype(np.int64), None),
    ]
    write_container(path, "dataset", meta, tensors)


def load(path):
    """Load any TSFO container and return the matching object."""
    kind, meta, tensors = read_container(path)
    if kind == "model":
        params = {}
        masks = {}
        for name, (arr, _) in tensors.items():
            if name.startswith("mask/"):
                masks[name[len("mask/"):]] = arr.astype(np.float32)
            else:
                params[name] = arr
        return TransformerModel(
            config=_config_from_meta(meta["config"]),
            params=params,
            masks=masks or None,
        )
    if kind == "quantized_model":
        weights = {
            name: QTensor(arr, qinfo[0], qinfo[1], qinfo[2])
            for name, (arr, qinfo) in tensors.items()
        }
        act = meta.get("act_qparams")
        if act is not None:
            act = {site: (float(s), int(z)) for site, (s, z) in act.items()}
        return QuantizedModel(
            config=_config_from_meta(meta["config"]),
            weights=weights,
            mode=meta["mode"],
            act_qparams=act,
        )
    if kind == "dataset":
        label_map = meta["label_map"]
        subjects = meta.get("subjects")
        split = meta.get("predefined_split")
        return TimeSeriesDataset(
            name=meta["name"],
            instances=tensors["instances"][0],
            labels=tensors["labels"][0],
            label_map=label_map,
            subjects=np.array(subjects) if subjects is not None else None,
            predefined_split=(
                (np.array(split[0]), np.array(split[1])) if split is not None else None
            ),
        )
    raise ParseError(f"{path}: unknown container kind {kind!r}")
