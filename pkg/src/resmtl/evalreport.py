"""Per-task metrics and size-stratified evaluation reports.

Classification tasks report accuracy and F1 (macro by default, micro via
config) plus per-class precision/recall/F1 and the confusion matrix.
Regression tasks report MSE and MAE over valid samples, in normalized
units with the raw-unit conversion attached.  Sized records are
additionally stratified into the diameter buckets <10, [10-20), [20-30),
>=30 mm; buckets are half-open so they partition the sized records, and
empty buckets are absent from the report rather than zero-filled.

All metrics reduce to sufficient statistics (confusion matrices, error
sums, valid counts), so reports over disjoint record sets can be computed
concurrently and merged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, NormalizationSpec
from .losses import CLASSIFICATION_TASKS, REGRESSION_TASKS
from .network import MultiTaskNet, predict_heads

SCHEMA_VERSION = 1

SIZE_BUCKETS = (
    ("<10", 0.0, 10.0),
    ("[10-20)", 10.0, 20.0),
    ("[20-30)", 20.0, 30.0),
    (">=30", 30.0, math.inf),
)


def accuracy(preds, truth) -> float:
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.shape != truth.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {truth.shape}")
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(preds == truth))


def confusion_matrix(preds, truth, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.size and (preds.min() < 0 or preds.max() >= num_classes
                       or truth.min() < 0 or truth.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (truth, preds), 1)
    return conf


def per_class_prf(conf: np.ndarray) -> list[dict[str, float]]:
    """Precision/recall/F1/support per class; a degenerate class (no
    predictions and no truth) scores 0."""
    out = []
    for c in range(conf.shape[0]):
        tp = float(conf[c, c])
        fp = float(conf[:, c].sum() - conf[c, c])
        fn = float(conf[c, :].sum() - conf[c, c])
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out.append({"precision": precision, "recall": recall, "f1": f1,
                    "support": int(conf[c, :].sum())})
    return out


def macro_f1(preds, truth, num_classes: int) -> float:
    """Unweighted mean over all classes of per-class F1."""
    if np.asarray(preds).size == 0:
        raise ValueError("macro F1 of an empty prediction set is undefined")
    conf = confusion_matrix(preds, truth, num_classes)
    return float(np.mean([m["f1"] for m in per_class_prf(conf)]))


def micro_f1(preds, truth, num_classes: int) -> float:
    """Pooled-count F1; equals accuracy for single-label classification."""
    conf = confusion_matrix(preds, truth, num_classes)
    return float(np.trace(conf) / conf.sum())


def mse_metric(preds, truth, mask=None) -> float:
    diff, n_valid = _masked_errors(preds, truth, mask)
    return float((diff**2).sum() / n_valid)


def mae_metric(preds, truth, mask=None) -> float:
    diff, n_valid = _masked_errors(preds, truth, mask)
    return float(np.abs(diff).sum() / n_valid)


def _masked_errors(preds, truth, mask):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if preds.shape != truth.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {truth.shape}")
    valid = np.ones(preds.shape[0], dtype=bool) if mask is None \
        else np.asarray(mask, dtype=bool).reshape(-1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid samples for regression metrics")
    return preds[valid] - truth[valid], n_valid


@dataclass
class ClassificationReport:
    task: str
    accuracy: float
    f1: float
    f1_average: str
    per_class: list[dict[str, float]]
    confusion: list[list[int]]
    num_samples: int

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "f1_average": self.f1_average,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "num_samples": self.num_samples,
        }


@dataclass
class RegressionReport:
    task: str
    mse: float
    mae: float
    num_valid: int
    units: str  # "normalized" | "raw"

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "mse": self.mse,
            "mae": self.mae,
            "num_valid": self.num_valid,
            "units": self.units,
        }


@dataclass
class BucketReport:
    label: str
    lo: float
    hi: float
    count: int
    classification: dict[str, ClassificationReport]
    regression: dict[str, dict[str, RegressionReport]]


@dataclass
class SizeStratifiedReport:
    buckets: list[BucketReport]


@dataclass
class EvalReport:
    classification: dict[str, ClassificationReport]
    regression: dict[str, dict[str, RegressionReport]]
    stratified: SizeStratifiedReport | None
    f1_average: str
    num_records: int


def classification_report(task, preds, truth, num_classes, f1_average="macro"
                          ) -> ClassificationReport:
    conf = confusion_matrix(preds, truth, num_classes)
    f1_fn = macro_f1 if f1_average == "macro" else micro_f1
    return ClassificationReport(
        task=task,
        accuracy=accuracy(preds, truth),
        f1=f1_fn(preds, truth, num_classes),
        f1_average=f1_average,
        per_class=per_class_prf(conf),
        confusion=conf.tolist(),
        num_samples=int(conf.sum()),
    )


def regression_reports(task, preds_norm, truth_norm, mask,
                       norm: NormalizationSpec) -> dict[str, RegressionReport]:
    """Normalized-unit report plus the raw-unit conversion (linear scaling
    by the task divisor, so raw MSE = divisor^2 * normalized MSE)."""
    n_valid = int(np.asarray(mask, dtype=bool).sum())
    divisor = norm.divisor(task)
    mse_n = mse_metric(preds_norm, truth_norm, mask)
    mae_n = mae_metric(preds_norm, truth_norm, mask)
    return {
        "normalized": RegressionReport(task, mse_n, mae_n, n_valid, "normalized"),
        "raw": RegressionReport(task, mse_n * divisor**2, mae_n * divisor,
                                n_valid, "raw"),
    }


def bucket_index(size_mm: float) -> int:
    for i, (_, lo, hi) in enumerate(SIZE_BUCKETS):
        if lo <= size_mm < hi:
            return i
    raise ValueError(f"size {size_mm} fits no bucket")


def stratify_by_size(
    sizes_mm: np.ndarray,
    class_preds: dict[str, np.ndarray],
    class_truth: dict[str, np.ndarray],
    class_masks: dict[str, np.ndarray],
    class_counts: dict[str, int],
    reg_preds: dict[str, np.ndarray],
    reg_truth: dict[str, np.ndarray],
    reg_masks: dict[str, np.ndarray],
    norm: NormalizationSpec,
    f1_average: str = "macro",
) -> SizeStratifiedReport:
    """All task metrics per diameter bucket, over records with known size."""
    sizes = np.asarray(sizes_mm, dtype=np.float64)
    sized = ~np.isnan(sizes)
    buckets = []
    for label, lo, hi in SIZE_BUCKETS:
        in_bucket = sized & (sizes >= lo) & (sizes < hi)
        count = int(in_bucket.sum())
        if count == 0:
            continue  # empty buckets are absent, not zero
        classification = {}
        for task in CLASSIFICATION_TASKS:
            if task not in class_preds:
                continue
            sel = in_bucket & class_masks[task]
            if not sel.any():
                continue
            classification[task] = classification_report(
                task, class_preds[task][sel], class_truth[task][sel],
                class_counts[task], f1_average)
        regression = {}
        for task in REGRESSION_TASKS:
            if task not in reg_preds:
                continue
            sel = in_bucket & reg_masks[task]
            if not sel.any():
                continue
            regression[task] = regression_reports(
                task, reg_preds[task][sel], reg_truth[task][sel],
                np.ones(int(sel.sum()), dtype=bool), norm)
        buckets.append(BucketReport(label, lo, hi, count, classification, regression))
    return SizeStratifiedReport(buckets=buckets)


def evaluate(net: MultiTaskNet, ds: Dataset, stratify: bool = True,
             f1_average: str = "macro") -> EvalReport:
    """Predict every head on the dataset and assemble the full report."""
    tensors = ds.tensors()
    heads = predict_heads(net, tensors.features)

    classification: dict[str, ClassificationReport] = {}
    class_preds, class_truth = {}, {}
    for task in CLASSIFICATION_TASKS:
        mask = tensors.masks[task]
        class_preds[task] = heads[task]["indices"]
        class_truth[task] = tensors.targets[task]
        if mask.any():
            classification[task] = classification_report(
                task, class_preds[task][mask], class_truth[task][mask],
                net.head_specs[task].num_classes, f1_average)

    regression: dict[str, dict[str, RegressionReport]] = {}
    reg_preds, reg_truth = {}, {}
    for task in REGRESSION_TASKS:
        mask = tensors.masks[task]
        reg_preds[task] = heads[task]["values"]
        reg_truth[task] = tensors.targets[task]
        if mask.any():
            regression[task] = regression_reports(
                task, reg_preds[task], reg_truth[task], mask, ds.norm)

    stratified = None
    sizes = ds.sizes_mm()
    if stratify and np.any(~np.isnan(sizes)):
        class_counts = {t: net.head_specs[t].num_classes for t in CLASSIFICATION_TASKS}
        stratified = stratify_by_size(
            sizes, class_preds, class_truth, tensors.masks, class_counts,
            reg_preds, reg_truth, tensors.masks, ds.norm, f1_average)

    return EvalReport(
        classification=classification,
        regression=regression,
        stratified=stratified,
        f1_average=f1_average,
        num_records=len(ds),
    )


# --------------------------------------------------------------------------
# rendering


def report_to_dict(report: EvalReport) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "f1_average": report.f1_average,
        "num_records": report.num_records,
        "classification": {t: r.to_dict() for t, r in report.classification.items()},
        "regression": {
            t: {units: r.to_dict() for units, r in by_units.items()}
            for t, by_units in report.regression.items()
        },
        "size_stratified": None,
    }
    if report.stratified is not None:
        doc["size_stratified"] = {
            "buckets": [
                {
                    "label": b.label,
                    "lo": b.lo,
                    "hi": "inf" if math.isinf(b.hi) else b.hi,
                    "count": b.count,
                    "classification": {t: r.to_dict() for t, r in b.classification.items()},
                    "regression": {
                        t: {u: r.to_dict() for u, r in by_units.items()}
                        for t, by_units in b.regression.items()
                    },
                }
                for b in report.stratified.buckets
            ]
        }
    return doc


def emit_report(report: EvalReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n"
    if fmt == "text":
        return _render_text(report)
    raise ValueError(f"unknown report format {fmt!r}")


def _fmt_row(cells, widths):
    return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()


def _render_text(report: EvalReport) -> str:
    lines: list[str] = []
    if report.classification:
        lines.append(f"Classification (F1 averaging: {report.f1_average})")
        widths = [12, 8, 8, 8]
        lines.append(_fmt_row(["task", "acc", "f1", "n"], widths))
        for task in CLASSIFICATION_TASKS:
            r = report.classification.get(task)
            if r is None:
                continue
            lines.append(_fmt_row(
                [task, f"{r.accuracy:.4f}", f"{r.f1:.4f}", r.num_samples], widths))
        lines.append("")

    if report.regression:
        lines.append("Regression (normalized units; raw units in brackets)")
        widths = [6, 10, 10, 24, 6]
        lines.append(_fmt_row(["task", "mse", "mae", "raw mse/mae", "n"], widths))
        for task in REGRESSION_TASKS:
            by_units = report.regression.get(task)
            if by_units is None:
                continue
            n, raw = by_units["normalized"], by_units["raw"]
            lines.append(_fmt_row(
                [task, f"{n.mse:.6f}", f"{n.mae:.6f}",
                 f"[{raw.mse:.4f} / {raw.mae:.4f}]", n.num_valid], widths))
        lines.append("")

    if report.stratified is not None and report.stratified.buckets:
        lines.append("Size-stratified classification")
        head = ["size range(mm)"]
        for task in CLASSIFICATION_TASKS:
            head += [f"{task} acc", f"{task} f1"]
        widths = [14] + [max(len(h), 8) for h in head[1:]]
        lines.append(_fmt_row(head, widths))
        for b in report.stratified.buckets:
            row = [b.label]
            for task in CLASSIFICATION_TASKS:
                r = b.classification.get(task)
                row += (["-", "-"] if r is None
                        else [f"{r.accuracy:.3f}", f"{r.f1:.3f}"])
            lines.append(_fmt_row(row, widths))
        lines.append("")

        lines.append("Size-stratified regression (normalized units)")
        head = ["size range(mm)"]
        for task in REGRESSION_TASKS:
            head += [f"{task} mse", f"{task} mae"]
        widths = [14] + [max(len(h), 10) for h in head[1:]]
        lines.append(_fmt_row(head, widths))
        for b in report.stratified.buckets:
            row = [b.label]
            for task in REGRESSION_TASKS:
                r = b.regression.get(task)
                row += (["-", "-"] if r is None
                        else [f"{r['normalized'].mse:.6f}", f"{r['normalized'].mae:.6f}"])
            lines.append(_fmt_row(row, widths))
        lines.append("")

    if not lines:
        lines.append("(empty report)")
        lines.append("")
    return "\n".join(lines)
