"""Task losses and the weighted total loss.

Each loss returns ``(scalar value, gradient w.r.t. the head output)`` with
mean reduction over the batch, so task-weight semantics do not depend on
batch size.  Heads emit raw logits; softmax/sigmoid happen here for
numerical stability.

Classification uses label-smoothing cross-entropy against the smoothed
target distribution q = (1-alpha)*onehot + alpha/C.  The literal printed
form of the smoothing loss, in which the alpha term is a constant that
never touches the gradients, is available as ``variant="printed"`` for
comparison; it is not the default because a constant offset defeats the
point of smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import Matrix, ShapeError, softmax_rows

TASKS = ("subtlety", "state", "z", "diagnosis", "x", "y", "size")
CLASSIFICATION_TASKS = ("subtlety", "state", "z", "diagnosis")
REGRESSION_TASKS = ("x", "y", "size")

LOSS_KINDS = ("label_smoothing_ce", "bce_with_logits", "mse")


@dataclass
class LabelSmoothingConfig:
    num_classes: int
    alpha: float = 0.1
    variant: str = "standard"  # or "printed": literal constant-alpha form

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"smoothing alpha must be in [0, 1), got {self.alpha}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.variant not in ("standard", "printed"):
            raise ValueError(f"unknown variant {self.variant!r}")


def label_smoothing_ce(
    logits: Matrix, targets: np.ndarray, cfg: LabelSmoothingConfig
) -> tuple[float, Matrix]:
    """Label-smoothing cross-entropy, mean-reduced over the batch.

    Returns the loss and d(loss)/d(logits) = (p - q) / batch via the
    softmax cross-entropy identity.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, num_classes = logits.shape
    if num_classes != cfg.num_classes:
        raise ShapeError(f"logits have {num_classes} columns, config says {cfg.num_classes}")
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logit rows vs {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        raise ValueError(f"target index out of range [0, {num_classes})")

    p = softmax_rows(logits)
    # log-softmax computed directly from shifted logits, not log(p)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    onehot = np.zeros_like(logits)
    onehot[np.arange(n), targets] = 1.0

    if cfg.variant == "printed":
        # -sum_c [(1-a) y_c log p_c + a/C]  ==  (1-a) * hard CE - a
        loss = float(-((1.0 - cfg.alpha) * (onehot * log_p).sum(axis=1) + cfg.alpha).mean())
        dlogits = (1.0 - cfg.alpha) * (p - onehot) / n
        return loss, dlogits

    q = (1.0 - cfg.alpha) * onehot + cfg.alpha / num_classes
    loss = float(-(q * log_p).sum(axis=1).mean())
    dlogits = (p - q) / n
    return loss, dlogits


def mse(
    pred: Matrix, target: Matrix, mask: np.ndarray | None = None
) -> tuple[float, Matrix]:
    """Mean squared error over valid samples: (1/N) sum (y_i - p_i)^2.

    Masked samples contribute zero loss and zero gradient; N counts valid
    samples, and N == 0 yields loss 0 with an all-zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: pred {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    if mask is None:
        valid = np.ones(n, dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool).reshape(-1)
        if valid.shape[0] != n:
            raise ShapeError(f"mask length {valid.shape[0]} vs batch size {n}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(pred)
    diff = np.where(valid.reshape(-1, *([1] * (pred.ndim - 1))), pred - target, 0.0)
    loss = float((diff**2).sum() / n_valid)
    dpred = 2.0 * diff / n_valid
    return loss, dpred


def bce_with_logits(logit: Matrix, target: np.ndarray) -> tuple[float, Matrix]:
    """Numerically stable binary cross-entropy on raw logits.

    L = mean[max(z, 0) - z*t + log(1 + exp(-|z|))], gradient (sigmoid(z) - t) / N.
    """
    z = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64).reshape(z.shape)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_with_logits targets must be 0 or 1")
    n = z.shape[0]
    e = np.exp(-np.abs(z))
    loss = float((np.maximum(z, 0.0) - z * t + np.log1p(e)).mean())
    sigma = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    dlogit = (sigma - t) / n
    return loss, dlogit


@dataclass
class TaskWeights:
    """The seven task-weight coefficients of the total loss."""

    weights: dict[str, float] = field(
        default_factory=lambda: {task: 1.0 for task in TASKS}
    )

    def __post_init__(self):
        missing = [t for t in TASKS if t not in self.weights]
        if missing:
            raise ValueError(f"missing task weights: {missing}")
        unknown = [t for t in self.weights if t not in TASKS]
        if unknown:
            raise ValueError(f"unknown tasks in weights: {unknown}")
        for task, w in self.weights.items():
            if w < 0:
                raise ValueError(f"weight for {task} must be >= 0, got {w}")

    def __getitem__(self, task: str) -> float:
        return self.weights[task]


@dataclass
class TaskLossBundle:
    """Per-task losses, head-output gradients, and valid-sample counts."""

    losses: dict[str, float]
    grads: dict[str, Matrix]
    valid_counts: dict[str, int]


def total_loss(bundle: TaskLossBundle, weights: TaskWeights) -> float:
    """Weighted sum over all seven tasks; the caller scales each task's
    head gradient by its weight before backprop."""
    missing = [t for t in TASKS if t not in bundle.losses]
    if missing:
        raise ValueError(f"loss bundle missing tasks: {missing}")
    return float(sum(weights[t] * bundle.losses[t] for t in TASKS))


def default_assignment(num_state_classes: int) -> dict[str, str]:
    """Per-task loss assignment: smoothed CE for classification heads,
    BCE-with-logits for a binary state head, MSE for regression heads."""
    assignment = {t: "label_smoothing_ce" for t in CLASSIFICATION_TASKS}
    if num_state_classes == 2:
        assignment["state"] = "bce_with_logits"
    assignment.update({t: "mse" for t in REGRESSION_TASKS})
    return assignment


def validate_assignment(assignment: dict[str, str], num_classes: dict[str, int]) -> None:
    missing = [t for t in TASKS if t not in assignment]
    if missing:
        raise ValueError(f"loss assignment missing tasks: {missing}")
    for task, kind in assignment.items():
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r} in loss assignment")
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {kind!r} for task {task}")
        if task in REGRESSION_TASKS and kind != "mse":
            raise ValueError(f"regression task {task} only supports mse, got {kind}")
        if kind == "bce_with_logits" and num_classes.get(task, 2) != 2:
            raise ValueError(f"bce_with_logits needs a binary task, {task} has "
                             f"{num_classes[task]} classes")


def task_losses(
    head_outputs: dict[str, Matrix],
    targets: dict[str, np.ndarray],
    masks: dict[str, np.ndarray],
    assignment: dict[str, str],
    alpha: float,
    smoothing_variant: str = "standard",
) -> TaskLossBundle:
    """Evaluate every task's loss with per-task validity masking.

    Classification losses see only the valid rows; their gradients are
    scattered back into full-batch shape with zeros at masked rows, so the
    backward pass sees one gradient per head output regardless of masking.
    """
    losses: dict[str, float] = {}
    grads: dict[str, Matrix] = {}
    counts: dict[str, int] = {}
    for task in TASKS:
        out = head_outputs[task]
        kind = assignment[task]
        valid = np.asarray(masks[task], dtype=bool).reshape(-1)
        n_valid = int(valid.sum())
        counts[task] = n_valid
        if n_valid == 0:
            losses[task] = 0.0
            grads[task] = np.zeros_like(out)
            continue
        if kind == "mse":
            loss, dout = mse(out, np.asarray(targets[task], dtype=np.float64).reshape(out.shape),
                             mask=valid)
        elif kind == "bce_with_logits":
            sub_loss, sub_grad = bce_with_logits(
                out[valid], np.asarray(targets[task])[valid].astype(np.float64))
            loss = sub_loss
            dout = np.zeros_like(out)
            dout[valid] = sub_grad
        else:
            cfg = LabelSmoothingConfig(num_classes=out.shape[1], alpha=alpha,
                                       variant=smoothing_variant)
            sub_loss, sub_grad = label_smoothing_ce(
                out[valid], np.asarray(targets[task])[valid], cfg)
            loss = sub_loss
            dout = np.zeros_like(out)
            dout[valid] = sub_grad
        losses[task] = loss
        grads[task] = dout
    return TaskLossBundle(losses=losses, grads=grads, valid_counts=counts)
