"""Dataset ingestion, preprocessing, splitting, and a synthetic generator.

Input files are UCR-style delimited text: one series per line, class label in
the first field, values tab- or comma-separated with dot decimal points.
Datasets are immutable after construction and safe to share across readers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ParseError
from .tensor import seeded_rng

log = logging.getLogger(__name__)


@dataclass
class TimeSeriesDataset:
    name: str
    instances: np.ndarray                 # [N, C, T] float32
    labels: np.ndarray                    # [N] int64 in 0..K-1
    label_map: dict = field(default_factory=dict)   # original label -> index
    subjects: np.ndarray | None = None    # [N] subject/household ids
    # (train_idx, test_idx) carried by datasets loaded from pre-split archives
    predefined_split: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if len(self.instances) == 0:
            raise InputError("dataset must be nonempty")
        if self.instances.ndim != 3:
            raise InputError(f"instances must be [N, C, T], got {self.instances.shape}")
        if len(self.labels) != len(self.instances):
            raise InputError("labels and instances disagree in length")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise InputError("labels must be dense 0..K-1")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.label_map == {} else len(self.label_map)

    @property
    def seq_len(self) -> int:
        return self.instances.shape[2]

    @property
    def channels(self) -> int:
        return self.instances.shape[1]

    def subset(self, idx: np.ndarray, name_suffix: str = "") -> "TimeSeriesDataset":
        return TimeSeriesDataset(
            name=self.name + name_suffix,
            instances=self.instances[idx],
            labels=self.labels[idx],
            label_map=self.label_map,
            subjects=self.subjects[idx] if self.subjects is not None else None,
        )


def _sniff_delimiter(line: str, lineno: int) -> str:
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    if line.strip() and " " in line.strip():
        return None  # whitespace-separated; split() handles runs
    raise ParseError(f"line {lineno}: cannot determine delimiter (need tab or comma)")


def load_ucr_delimited(path, name: str | None = None) -> TimeSeriesDataset:
    """Parse a UCR-style file: label first, then T values per line.

    Labels may be arbitrary integers or strings; they are remapped to dense
    0..K-1 indices by sorted order (numeric sort when every label parses as a
    number). Series are univariate (C = 1).
    """
    raw_labels: list[str] = []
    rows: list[list[float]] = []
    width = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            delim = _sniff_delimiter(line, lineno)
            fields = line.strip().split(delim) if delim else line.split()
            if len(fields) < 2:
                raise ParseError(f"line {lineno}: need a label and at least one value")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise ParseError(
                    f"line {lineno}: expected {width} fields, found {len(fields)}"
                )
            raw_labels.append(fields[0])
            try:
                rows.append([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: bad numeric value ({exc})") from None
    if not rows:
        raise ParseError(f"{path}: file contains no data rows")

    uniques = sorted(set(raw_labels), key=_label_sort_key)
    label_map = {lbl: i for i, lbl in enumerate(uniques)}
    labels = np.array([label_map[l] for l in raw_labels], dtype=np.int64)
    instances = np.asarray(rows, dtype=np.float32)[:, None, :]
    return TimeSeriesDataset(
        name=name or str(path),
        instances=instances,
        labels=labels,
        label_map=label_map,
    )


def _label_sort_key(label: str):
    try:
        return (0, float(label), "")
    except ValueError:
        return (1, 0.0, label)


def load_ucr_pair(train_path, test_path, name: str | None = None) -> TimeSeriesDataset:
    """Load a pre-split UCR train/test pair into one dataset.

    The archive's split is preserved in ``predefined_split`` so subject-wise
    splitting can fall back to it when no subject metadata exists.
    """
    train = load_ucr_delimited(train_path, name=name)
    test = load_ucr_delimited(test_path, name=name)
    if train.seq_len != test.seq_len:
        raise ParseError("train and test files disagree on series length")
    merged_labels = sorted(set(train.label_map) | set(test.label_map), key=_label_sort_key)
    label_map = {lbl: i for i, lbl in enumerate(merged_labels)}
    inv_train = {v: k for k, v in train.label_map.items()}
    inv_test = {v: k for k, v in test.label_map.items()}
    labels = np.concatenate(
        [
            np.array([label_map[inv_train[l]] for l in train.labels], dtype=np.int64),
            np.array([label_map[inv_test[l]] for l in test.labels], dtype=np.int64),
        ]
    )
    n_train = len(train)
    instances = np.concatenate([train.instances, test.instances], axis=0)
    return TimeSeriesDataset(
        name=name or train.name,
        instances=instances,
        labels=labels,
        label_map=label_map,
        predefined_split=(
            np.arange(n_train),
            np.arange(n_train, n_train + len(test)),
        ),
    )


def min_max_normalize(series: np.ndarray) -> np.ndarray:
    """Scale each channel of a series into [0, 1].

    Constant channels map to 0.5 (midpoint convention: 0 or 1 would bias the
    classifier toward an arbitrary extreme).
    """
    arr = np.asarray(series, dtype=np.float32)
    if arr.size == 0:
        raise InputError("cannot normalize an empty series")
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    lo = arr.min(axis=-1, keepdims=True)
    hi = arr.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span[..., 0] == 0
    safe = np.where(span == 0, 1.0, span)
    out = (arr - lo) / safe
    out[flat] = 0.5
    return out[0] if squeeze else out


def normalize_dataset(dataset: TimeSeriesDataset) -> TimeSeriesDataset:
    return TimeSeriesDataset(
        name=dataset.name,
        instances=np.stack([min_max_normalize(x) for x in dataset.instances]),
        labels=dataset.labels,
        label_map=dataset.label_map,
        subjects=dataset.subjects,
        predefined_split=dataset.predefined_split,
    )


def resample_linear(series: np.ndarray, target_len: int) -> np.ndarray:
    """Linearly interpolate a series to ``target_len`` points.

    Sampling positions are uniform over the original index range, so the
    first and last points are preserved exactly.
    """
    arr = np.asarray(series, dtype=np.float32)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    src_len = arr.shape[-1]
    if src_len < 2 or target_len < 2:
        raise InputError("resampling needs source and target lengths >= 2")
    positions = np.linspace(0.0, src_len - 1, target_len)
    out = np.stack([np.interp(positions, np.arange(src_len), ch) for ch in arr])
    out = out.astype(np.float32)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class WindowSpec:
    length: int
    stride: int

    def __post_init__(self):
        if not 1 <= self.stride <= self.length:
            raise InputError(f"need 1 <= stride <= length, got {self}")


def segment_windows(series: np.ndarray, spec: WindowSpec) -> list[np.ndarray]:
    """Cut a [C, T] series into floor((T-w)/s)+1 overlapping [C, w] windows."""
    arr = np.asarray(series)
    if arr.ndim != 2:
        raise InputError(f"expected [C, T] series, got shape {arr.shape}")
    t = arr.shape[1]
    if spec.length > t:
        raise InputError(f"window length {spec.length} exceeds series length {t}")
    count = (t - spec.length) // spec.stride + 1
    return [
        arr[:, i * spec.stride : i * spec.stride + spec.length].copy()
        for i in range(count)
    ]


def window_count(t: int, w: int, s: int) -> int:
    return (t - w) // s + 1


def window_dataset(dataset: TimeSeriesDataset, spec: WindowSpec) -> TimeSeriesDataset:
    """Segment every instance; each window inherits its parent's label.

    Subject ids (when present) are inherited too, so subject-wise splitting
    stays leakage-free after windowing.
    """
    instances = []
    labels = []
    subjects = [] if dataset.subjects is not None else None
    for i, series in enumerate(dataset.instances):
        for win in segment_windows(series, spec):
            instances.append(win)
            labels.append(dataset.labels[i])
            if subjects is not None:
                subjects.append(dataset.subjects[i])
    return TimeSeriesDataset(
        name=f"{dataset.name}:w{spec.length}s{spec.stride}",
        instances=np.stack(instances),
        labels=np.array(labels, dtype=np.int64),
        label_map=dataset.label_map,
        subjects=np.array(subjects) if subjects is not None else None,
    )


def subject_wise_split(
    dataset: TimeSeriesDataset,
    train_fraction: float,
    seed: int,
) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    """Partition by subject so no household spans train and test.

    Subjects are shuffled with a seeded generator and the first
    round(fraction * S) of them (clamped so both sides stay nonempty) become
    the training side. Datasets without subject ids fall back to their
    predefined archive split, with a warning.
    """
    if not 0.0 < train_fraction < 1.0:
        raise InputError("train_fraction must be in (0, 1)")
    if dataset.subjects is None:
        if dataset.predefined_split is not None:
            log.warning(
                "dataset %s has no subject ids; using its predefined split",
                dataset.name,
            )
            train_idx, test_idx = dataset.predefined_split
            return dataset.subset(train_idx, ":train"), dataset.subset(test_idx, ":test")
        raise InputError("dataset has neither subject ids nor a predefined split")
    subjects = np.array(sorted(set(dataset.subjects.tolist())))
    if len(subjects) < 2:
        raise InputError("subject-wise split needs at least two subjects")
    rng = seeded_rng(seed)
    order = rng.permutation(len(subjects))
    n_train = int(round(train_fraction * len(subjects)))
    n_train = min(max(n_train, 1), len(subjects) - 1)
    train_subjects = set(subjects[order[:n_train]].tolist())
    is_train = np.array([s in train_subjects for s in dataset.subjects.tolist()])
    return (
        dataset.subset(np.where(is_train)[0], ":train"),
        dataset.subset(np.where(~is_train)[0], ":test"),
    )


def synth_generate(
    num_classes: int,
    per_class: int,
    length: int,
    noise: float,
    seed: int,
    name: str = "synthetic",
) -> TimeSeriesDataset:
    """Device-like synthetic dataset for desk-scale verification.

    Each class is a duty-cycled square wave with a class-specific period,
    duty cycle, and amplitude, plus i.i.d. Gaussian noise. Subject ids are
    assigned round-robin over ceil(per_class / 5) synthetic households, so
    every household sees every class.
    """
    if num_classes < 2:
        raise InputError("need at least two classes")
    if per_class < 1:
        raise InputError("need at least one instance per class")
    if length < 16:
        raise InputError("series length must be at least 16")
    if noise < 0:
        raise InputError("noise sigma must be nonnegative")
    rng = seeded_rng(seed)
    t = np.arange(length)
    households = max(1, math.ceil(per_class / 5))

    instances = []
    labels = []
    subjects = []
    for c in range(num_classes):
        period = max(4, length // (3 + 2 * c))
        duty = 0.25 + 0.5 * c / max(1, num_classes - 1)
        amplitude = 0.6 + 0.4 * c / max(1, num_classes - 1)
        base = np.where((t % period) < duty * period, amplitude, 0.05).astype(np.float32)
        for i in range(per_class):
            wave = base + rng.normal(0.0, noise, size=length) if noise > 0 else base.copy()
            instances.append(wave.astype(np.float32)[None, :])
            labels.append(c)
            subjects.append(f"h{i % households}")
    return TimeSeriesDataset(
        name=name,
        instances=np.stack(instances),
        labels=np.array(labels, dtype=np.int64),
        label_map={c: c for c in range(num_classes)},
        subjects=np.array(subjects),
    )
