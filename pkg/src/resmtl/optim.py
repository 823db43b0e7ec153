"""Adam optimizer and the training loop.

Training is deterministic: (seed, config, data) fully determine the final
parameters.  Each epoch shuffles with the seeded RngState, partitions into
batches (the last partial batch is kept), runs a train-mode forward,
builds the masked task-loss bundle, scales each head gradient by its task
weight, backprops, and applies one Adam step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .backend import kernels
from .losses import TASKS, TaskWeights, task_losses, validate_assignment
from .network import MultiTaskNet, backward, forward, parameters
from .numcore import RngState


class NanLossError(RuntimeError):
    """Raised when a task loss goes non-finite during training."""

    def __init__(self, task: str, epoch: int):
        super().__init__(f"non-finite loss for task {task!r} at epoch {epoch}")
        self.task = task
        self.epoch = epoch


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must be in [0, 1)")
        if self.t < 0:
            raise ValueError("step counter must be >= 0")

    @classmethod
    def for_network(cls, net: MultiTaskNet, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, arr in parameters(net):
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(
    state: AdamState,
    params: list[tuple[str, np.ndarray]],
    grads: dict[str, np.ndarray],
) -> None:
    """One in-place Adam update with bias correction over all parameters."""
    state.t += 1
    for name, param in params:
        grad = grads[name]
        if grad.shape != param.shape:
            raise ValueError(
                f"gradient for {name} has shape {grad.shape}, parameter is {param.shape}"
            )
        kernels.adam_update(
            param.reshape(-1),
            np.ascontiguousarray(grad, dtype=np.float64).reshape(-1),
            state.m[name].reshape(-1),
            state.v[name].reshape(-1),
            state.lr,
            state.beta1,
            state.beta2,
            state.epsilon,
            state.t,
        )


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout_rate: float = 0.2
    label_smoothing_alpha: float = 0.1
    smoothing_variant: str = "standard"
    task_weights: TaskWeights = field(default_factory=TaskWeights)
    loss_assignment: dict[str, str] | None = None  # None: derive from the data
    early_stop_patience: int | None = None
    trace_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    task_losses: dict[str, float]
    holdout: dict[str, float] | None = None


@dataclass
class TrainTrace:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.epochs:
            lines.append(json.dumps({
                "epoch": rec.epoch,
                "total_loss": rec.total_loss,
                "task_losses": rec.task_losses,
                "holdout": rec.holdout,
            }, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def _epoch_losses(
    net, tensors, assignment, alpha, variant
) -> dict[str, float]:
    outs, _ = forward(net, tensors.features, mode="eval")
    bundle = task_losses(outs, tensors.targets, tensors.masks, assignment, alpha, variant)
    return bundle.losses


def train(net: MultiTaskNet, dataset, cfg: TrainConfig, holdout=None) -> TrainTrace:
    """Train the network in place; returns the per-epoch trace.

    ``dataset`` (and optional ``holdout``) must expose ``tensors()``
    returning features plus per-task targets and validity masks (see
    ``data.TrainTensors``).
    """
    tensors = dataset.tensors()
    n = tensors.features.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    if tensors.features.shape[1] != net.input_dim:
        raise ValueError(
            f"feature width {tensors.features.shape[1]} does not match "
            f"network input_dim {net.input_dim}"
        )
    assignment = cfg.loss_assignment
    if assignment is None:
        raise ValueError("cfg.loss_assignment must be resolved before train()")
    validate_assignment(assignment, {t: s.num_classes for t, s in net.head_specs.items()
                                     if s.kind == "classification"})

    rng = RngState(cfg.seed, stream="train")
    state = AdamState.for_network(
        net, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon
    )
    params = parameters(net)
    holdout_tensors = holdout.tensors() if holdout is not None else None

    trace = TrainTrace()
    best_holdout = np.inf
    bad_epochs = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        loss_sums = {t: 0.0 for t in TASKS}
        count_sums = {t: 0 for t in TASKS}
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = tensors.features[idx]
            targets = {t: tensors.targets[t][idx] for t in TASKS}
            masks = {t: tensors.masks[t][idx] for t in TASKS}
            outs, cache = forward(net, batch, mode="train", rng=rng)
            bundle = task_losses(outs, targets, masks, assignment,
                                 cfg.label_smoothing_alpha, cfg.smoothing_variant)
            for t in TASKS:
                if not np.isfinite(bundle.losses[t]):
                    raise NanLossError(t, epoch)
                loss_sums[t] += bundle.losses[t] * bundle.valid_counts[t]
                count_sums[t] += bundle.valid_counts[t]
            head_grads = {t: cfg.task_weights[t] * bundle.grads[t] for t in TASKS}
            grads = backward(net, cache, head_grads)
            adam_step(state, params, grads)

        epoch_task = {t: (loss_sums[t] / count_sums[t] if count_sums[t] else 0.0)
                      for t in TASKS}
        epoch_total = float(sum(cfg.task_weights[t] * epoch_task[t] for t in TASKS))

        holdout_metrics = None
        if holdout_tensors is not None:
            h_losses = _epoch_losses(net, holdout_tensors, assignment,
                                     cfg.label_smoothing_alpha, cfg.smoothing_variant)
            h_total = float(sum(cfg.task_weights[t] * h_losses[t] for t in TASKS))
            holdout_metrics = {"total_loss": h_total, **{f"loss_{t}": h_losses[t]
                                                         for t in TASKS}}

        trace.epochs.append(EpochRecord(epoch, epoch_total, epoch_task, holdout_metrics))

        if cfg.early_stop_patience is not None and holdout_metrics is not None:
            if holdout_metrics["total_loss"] < best_holdout - 1e-12:
                best_holdout = holdout_metrics["total_loss"]
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.early_stop_patience:
                    break

    if cfg.trace_path:
        with open(cfg.trace_path, "w", encoding="utf-8") as fh:
            fh.write(trace.to_jsonl())
    return trace
