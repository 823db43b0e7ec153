"""Dataset schema, CSV ingestion, normalization, splitting, and synthesis.

Feature CSV contract (shared with the offline feature extractor):
header ``id,f0,...,f{D-1},subtlety,state,z,diagnosis,x_px,y_px,size_mm``;
UTF-8; '.' decimal; empty cell = missing value; feature cells are decimal
renderings of 64-bit floats that round-trip to the bit (``repr(float)``).
Lines starting with '#' before the header are ignored, so producers may
record provenance (e.g. feature concatenation order) in a comment line.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import CLASSIFICATION_TASKS, REGRESSION_TASKS, TASKS
from .numcore import RngState

LABEL_COLUMNS = ("subtlety", "state", "z", "diagnosis", "x_px", "y_px", "size_mm")

DEFAULT_CLASS_COUNTS = {"subtlety": 5, "state": 2, "z": 4, "diagnosis": 3}


class CsvFormatError(ValueError):
    """Malformed feature CSV; the message carries the offending line number."""


@dataclass
class SampleRecord:
    id: str
    features: np.ndarray
    subtlety: int | None = None
    state: int | None = None
    z: int | None = None
    diagnosis: int | None = None
    x_px: float | None = None
    y_px: float | None = None
    size_mm: float | None = None

    def class_index(self, task: str) -> int | None:
        return getattr(self, task)

    def raw_target(self, task: str) -> float | None:
        return {"x": self.x_px, "y": self.y_px, "size": self.size_mm}[task]


@dataclass
class LabelVocab:
    """Per classification task, raw label strings in stable sorted order."""

    labels: dict[str, list[str]]

    def __post_init__(self):
        for task, names in self.labels.items():
            if task not in CLASSIFICATION_TASKS:
                raise ValueError(f"vocab for unknown task {task!r}")
            if sorted(names) != list(names) or len(set(names)) != len(names):
                raise ValueError(f"vocab for {task} must be sorted and unique")

    def num_classes(self, task: str) -> int:
        return len(self.labels[task])

    def index_of(self, task: str, raw: str) -> int:
        try:
            return self.labels[task].index(raw)
        except ValueError:
            raise KeyError(f"label {raw!r} not in vocab for task {task}") from None

    def label_of(self, task: str, index: int) -> str:
        return self.labels[task][index]

    def class_counts(self) -> dict[str, int]:
        return {task: len(names) for task, names in self.labels.items()}


@dataclass
class NormalizationSpec:
    """Target projections: x/y by image size, nodule size by a divisor."""

    image_width_px: float = 2048.0
    image_height_px: float = 2048.0
    size_divisor_mm: float | None = None  # None: resolve to the dataset max

    def __post_init__(self):
        for name in ("image_width_px", "image_height_px"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.size_divisor_mm is not None and self.size_divisor_mm <= 0:
            raise ValueError("size_divisor_mm must be > 0")

    def divisor(self, task: str) -> float:
        if task == "x":
            return self.image_width_px
        if task == "y":
            return self.image_height_px
        if task == "size":
            if self.size_divisor_mm is None:
                raise ValueError("size divisor unresolved; run normalize_targets first")
            return self.size_divisor_mm
        raise ValueError(f"unknown regression task {task!r}")

    def normalize(self, task: str, value: float) -> float:
        return value / self.divisor(task)

    def denormalize(self, task: str, value: float) -> float:
        return value * self.divisor(task)


@dataclass
class TrainTensors:
    """Materialized arrays for training and evaluation.

    Classification targets are int64 with -1 at masked rows; regression
    targets are normalized float64 with NaN at masked rows.
    """

    features: np.ndarray
    targets: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]


@dataclass
class Dataset:
    records: list[SampleRecord]
    vocab: LabelVocab
    norm: NormalizationSpec
    feature_dim: int
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def tensors(self) -> TrainTensors:
        n = len(self.records)
        features = np.stack([r.features for r in self.records]) if n else \
            np.zeros((0, self.feature_dim))
        targets: dict[str, np.ndarray] = {}
        masks: dict[str, np.ndarray] = {}
        for task in CLASSIFICATION_TASKS:
            idx = np.array(
                [-1 if r.class_index(task) is None else r.class_index(task)
                 for r in self.records], dtype=np.int64)
            targets[task] = idx
            masks[task] = idx >= 0
        for task in REGRESSION_TASKS:
            raw = np.array(
                [np.nan if r.raw_target(task) is None else r.raw_target(task)
                 for r in self.records], dtype=np.float64)
            masks[task] = ~np.isnan(raw)
            targets[task] = raw / self.norm.divisor(task)
        return TrainTensors(features=features, targets=targets, masks=masks)

    def raw_targets(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        raw = np.array(
            [np.nan if r.raw_target(task) is None else r.raw_target(task)
             for r in self.records], dtype=np.float64)
        return raw, ~np.isnan(raw)

    def sizes_mm(self) -> np.ndarray:
        return np.array(
            [np.nan if r.size_mm is None else r.size_mm for r in self.records])


def _parse_header(header: list[str], line_no: int) -> int:
    if not header or header[0] != "id":
        raise CsvFormatError(f"line {line_no}: header must start with 'id'")
    n_features = len(header) - 1 - len(LABEL_COLUMNS)
    if n_features < 1:
        raise CsvFormatError(f"line {line_no}: header has no feature columns")
    expected = ["id"] + [f"f{i}" for i in range(n_features)] + list(LABEL_COLUMNS)
    if header != expected:
        raise CsvFormatError(
            f"line {line_no}: header does not match the feature CSV contract "
            f"(expected id,f0,...,f{n_features - 1},{','.join(LABEL_COLUMNS)})"
        )
    return n_features


def _parse_float(cell: str, line_no: int, what: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise CsvFormatError(f"line {line_no}: bad {what} value {cell!r}") from None
    if not np.isfinite(value):
        raise CsvFormatError(f"line {line_no}: non-finite {what} value {cell!r}")
    return value


def load_csv(
    path,
    image_width_px: float = 2048.0,
    image_height_px: float = 2048.0,
    size_divisor_mm: float | None = None,
) -> Dataset:
    """Parse a feature CSV into a Dataset, building the label vocabulary
    from the observed labels (stable sorted order)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = None
        line_no = 0
        rows: list[tuple[int, list[str]]] = []
        for row in reader:
            line_no += 1
            if header is None and row and row[0].startswith("#"):
                continue  # provenance comment before the header
            if header is None:
                header = row
                header_line = line_no
                continue
            if row:
                rows.append((line_no, row))
    if header is None:
        raise CsvFormatError("line 1: empty file, no header")
    n_features = _parse_header(header, header_line)
    n_cols = len(header)

    observed: dict[str, set[str]] = {t: set() for t in CLASSIFICATION_TASKS}
    parsed = []
    for line_no, row in rows:
        if len(row) != n_cols:
            raise CsvFormatError(
                f"line {line_no}: expected {n_cols} fields, got {len(row)}")
        rec_id = row[0]
        feats = np.array(
            [_parse_float(c, line_no, "feature") for c in row[1 : 1 + n_features]])
        label_cells = dict(zip(LABEL_COLUMNS, row[1 + n_features :]))
        raw_labels = {}
        for task in CLASSIFICATION_TASKS:
            cell = label_cells[task].strip()
            raw_labels[task] = cell or None
            if cell:
                observed[task].add(cell)
        numeric = {}
        for col in ("x_px", "y_px", "size_mm"):
            cell = label_cells[col].strip()
            numeric[col] = _parse_float(cell, line_no, col) if cell else None
        if numeric["size_mm"] is not None and numeric["size_mm"] <= 0:
            raise CsvFormatError(f"line {line_no}: size_mm must be > 0")
        parsed.append((rec_id, feats, raw_labels, numeric))

    vocab = LabelVocab({t: sorted(observed[t]) for t in CLASSIFICATION_TASKS})
    records = []
    for rec_id, feats, raw_labels, numeric in parsed:
        indices = {
            t: (None if raw_labels[t] is None else vocab.index_of(t, raw_labels[t]))
            for t in CLASSIFICATION_TASKS
        }
        records.append(SampleRecord(id=rec_id, features=feats, **indices, **numeric))

    norm = NormalizationSpec(image_width_px, image_height_px, size_divisor_mm)
    return Dataset(records=records, vocab=vocab, norm=norm, feature_dim=n_features)


def save_csv(ds: Dataset, path) -> None:
    """Write a Dataset in the feature CSV contract; floats are rendered
    with ``repr`` so they round-trip to the bit."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"f{i}" for i in range(ds.feature_dim)]
                        + list(LABEL_COLUMNS))
        for rec in ds.records:
            row = [rec.id] + [repr(float(v)) for v in rec.features]
            for task in CLASSIFICATION_TASKS:
                idx = rec.class_index(task)
                row.append("" if idx is None else ds.vocab.label_of(task, idx))
            for value in (rec.x_px, rec.y_px, rec.size_mm):
                row.append("" if value is None else repr(float(value)))
            writer.writerow(row)


def normalize_targets(ds: Dataset) -> Dataset:
    """Resolve the size divisor (dataset max when unset) and count
    out-of-range raw targets; normalized values come out of ``tensors()``
    and the inverse lives on the NormalizationSpec."""
    divisor = ds.norm.size_divisor_mm
    if divisor is None:
        sizes = [r.size_mm for r in ds.records if r.size_mm is not None]
        divisor = max(sizes) if sizes else 1.0
    norm = replace(ds.norm, size_divisor_mm=divisor)
    warnings = list(ds.warnings)
    bounds = {"x": norm.image_width_px, "y": norm.image_height_px, "size": divisor}
    for task, bound in bounds.items():
        raw, mask = ds.raw_targets(task)
        bad = int(((raw[mask] < 0) | (raw[mask] > bound)).sum())
        if bad:
            warnings.append(
                f"{task}: {bad} raw value(s) outside [0, {bound}] normalize outside [0, 1]")
    return Dataset(records=ds.records, vocab=ds.vocab, norm=norm,
                   feature_dim=ds.feature_dim, warnings=warnings)


def split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle then partition; the two sides are disjoint, their
    union preserves all records, and vocab/normalization are shared."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    n = len(ds.records)
    n_train = int(n * fraction)
    if n_train == 0 or n_train == n:
        raise ValueError(
            f"fraction {fraction} leaves an empty side for {n} records")
    perm = RngState(seed, stream="split").permutation(n)
    train_recs = [ds.records[i] for i in perm[:n_train]]
    test_recs = [ds.records[i] for i in perm[n_train:]]
    make = lambda recs: Dataset(records=recs, vocab=ds.vocab, norm=ds.norm,
                                feature_dim=ds.feature_dim)
    return make(train_recs), make(test_recs)


def _label_set(task: str, count: int) -> list[str]:
    if task == "subtlety" and count <= 9:
        return [str(i + 1) for i in range(count)]
    if task == "state" and count == 2:
        return ["nodule", "non-nodule"]
    if task == "z" and count <= 9:
        return [f"zone{i + 1}" for i in range(count)]
    if task == "diagnosis" and count == 3:
        return ["benign", "malignant", "suspicious"]
    return [f"{task[:1]}{i:03d}" for i in range(count)]


def synth_generate(
    class_counts: dict[str, int] | None = None,
    n: int = 256,
    feature_dim: int = 32,
    noise: float = 0.05,
    seed: int = 0,
    priors: dict[str, list[float]] | None = None,
    missing_rate: float = 0.0,
    image_width_px: float = 2048.0,
    image_height_px: float = 2048.0,
    size_range_mm: tuple[float, float] = (3.0, 45.0),
) -> Dataset:
    """Synthesize a dataset in which every head's target is learnable.

    Generative recipe, in fixed draw order for reproducibility:
    1. one class per sample per classification task (uniform unless
       ``priors[task]`` is given), realized as a one-hot block of features;
    2. three uniforms u, v, s per sample, placed verbatim in three feature
       columns; targets are x = u * image_width, y = v * image_height,
       size = size_range[0] + s * (size_range[1] - size_range[0]);
    3. one normal per feature cell: scaled by ``noise`` and added to the
       signal columns, used at unit scale as distractor columns;
    4. with ``missing_rate`` > 0, a uniform per sample masks x/y/size.

    At noise 0 the regression targets are exact affine functions of the
    features, so a linear probe recovers them to machine precision.
    """
    counts = dict(DEFAULT_CLASS_COUNTS if class_counts is None else class_counts)
    if sorted(counts) != sorted(CLASSIFICATION_TASKS):
        raise ValueError(f"class_counts must cover {CLASSIFICATION_TASKS}")
    if n < 1:
        raise ValueError("need at least one sample")
    signal_dims = sum(counts.values()) + len(REGRESSION_TASKS)
    if feature_dim < signal_dims:
        raise ValueError(
            f"feature_dim {feature_dim} < required signal dims {signal_dims}")

    rng = RngState(seed, stream="synth")
    class_idx: dict[str, np.ndarray] = {}
    for task in CLASSIFICATION_TASKS:
        c = counts[task]
        p = priors.get(task) if priors else None
        if p is None:
            p = [1.0 / c] * c
        if len(p) != c or abs(sum(p) - 1.0) > 1e-9:
            raise ValueError(f"priors for {task} must be {c} values summing to 1")
        edges = np.cumsum(p)
        class_idx[task] = np.searchsorted(edges, rng.uniforms(n), side="right")
        class_idx[task] = np.minimum(class_idx[task], c - 1).astype(np.int64)

    u = rng.uniforms(n)
    v = rng.uniforms(n)
    s = rng.uniforms(n)
    noise_block = rng.normals(n * feature_dim).reshape(n, feature_dim)

    features = np.zeros((n, feature_dim))
    offset = 0
    for task in CLASSIFICATION_TASKS:
        c = counts[task]
        features[np.arange(n), offset + class_idx[task]] = 1.0
        offset += c
    features[:, offset] = u
    features[:, offset + 1] = v
    features[:, offset + 2] = s
    features[:, : offset + 3] += noise * noise_block[:, : offset + 3]
    features[:, offset + 3 :] = noise_block[:, offset + 3 :]

    lo, hi = size_range_mm
    x_px = u * image_width_px
    y_px = v * image_height_px
    size_mm = lo + s * (hi - lo)

    missing = np.zeros(n, dtype=bool)
    if missing_rate > 0.0:
        missing = rng.uniforms(n) < missing_rate

    vocab = LabelVocab({t: _label_set(t, counts[t]) for t in CLASSIFICATION_TASKS})
    records = []
    for i in range(n):
        records.append(SampleRecord(
            id=f"synth-{i:05d}",
            features=features[i].copy(),
            subtlety=int(class_idx["subtlety"][i]),
            state=int(class_idx["state"][i]),
            z=int(class_idx["z"][i]),
            diagnosis=int(class_idx["diagnosis"][i]),
            x_px=None if missing[i] else float(x_px[i]),
            y_px=None if missing[i] else float(y_px[i]),
            size_mm=None if missing[i] else float(size_mm[i]),
        ))
    norm = NormalizationSpec(image_width_px, image_height_px, None)
    return Dataset(records=records, vocab=vocab, norm=norm, feature_dim=feature_dim)
