"""Analytic-vs-numeric gradient verification for the full multi-task loss.

Builds a small seeded network and compares every parameter's analytic
gradient against central finite differences of the weighted total loss.
An entry passes when |analytic - numeric| <= 1e-8 (absolute floor) or the
relative error is within tolerance; the report carries the per-layer
maxima so a failure names the offending parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import TASKS, TaskWeights, default_assignment, task_losses, total_loss
from .network import backward, build_network, forward, head_specs_from, parameters
from .numcore import RngState

CHECK_CLASS_COUNTS = {"subtlety": 3, "state": 2, "z": 3, "diagnosis": 3}


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float  # over entries above the absolute floor; 0 if none
    max_abs_error: float
    worst_param: str
    per_layer: dict[str, float] = field(default_factory=dict)
    seeds: tuple[int, ...] = ()

    def table(self) -> str:
        width = max(len(name) for name in self.per_layer)
        lines = [f"{'parameter'.ljust(width)}  max rel error"]
        for name, err in self.per_layer.items():
            lines.append(f"{name.ljust(width)}  {err:.3e}")
        lines.append(f"worst: {self.worst_param} (rel {self.max_rel_error:.3e}, "
                     f"max abs {self.max_abs_error:.3e})")
        return "\n".join(lines)


def _toy_problem(seed: int, input_dim: int, batch: int):
    rng = RngState(seed + 1000)
    feats = rng.normals(batch * input_dim).reshape(batch, input_dim)
    targets = {
        "subtlety": (rng.uniforms(batch) * 3).astype(np.int64),
        "state": (rng.uniforms(batch) * 2).astype(np.int64),
        "z": (rng.uniforms(batch) * 3).astype(np.int64),
        "diagnosis": (rng.uniforms(batch) * 3).astype(np.int64),
        "x": rng.uniforms(batch),
        "y": rng.uniforms(batch),
        "size": rng.uniforms(batch),
    }
    masks = {t: np.ones(batch, dtype=bool) for t in TASKS}
    return feats, targets, masks


def gradient_check(
    seeds: tuple[int, ...] = (1, 2, 3),
    input_dim: int = 8,
    hidden_dim: int = 8,
    batch: int = 6,
    h: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-8,
    alpha: float = 0.1,
    corrupt_param: str | None = None,
) -> GradCheckResult:
    """Check every parameter's gradient for each seed; dropout stays off.

    ``corrupt_param`` perturbs that parameter's analytic gradient before
    comparison, as a negative control that the check can fail.
    """
    assignment = default_assignment(CHECK_CLASS_COUNTS["state"])
    weights = TaskWeights()
    per_layer: dict[str, float] = {}
    worst = ("", 0.0)
    max_abs = 0.0

    for seed in seeds:
        specs = head_specs_from(CHECK_CLASS_COUNTS, assignment)
        net = build_network(input_dim, hidden_dim, 0.0, specs, RngState(seed))
        feats, targets, masks = _toy_problem(seed, input_dim, batch)

        def loss_value() -> float:
            outs, _ = forward(net, feats, mode="eval")
            bundle = task_losses(outs, targets, masks, assignment, alpha)
            return total_loss(bundle, weights)

        outs, cache = forward(net, feats, mode="eval")
        bundle = task_losses(outs, targets, masks, assignment, alpha)
        head_grads = {t: weights[t] * bundle.grads[t] for t in TASKS}
        grads = backward(net, cache, head_grads)
        if corrupt_param is not None:
            grads[corrupt_param] = grads[corrupt_param] + 1e-3

        for name, param in parameters(net):
            flat = param.reshape(-1)
            gflat = grads[name].reshape(-1)
            layer_worst = per_layer.get(name, 0.0)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_value()
                flat[i] = orig - h
                fm = loss_value()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                err = abs(numeric - gflat[i])
                if err > max_abs:
                    max_abs = err
                rel = 0.0 if err <= abs_floor else err / max(abs(numeric), abs(gflat[i]))
                if rel > layer_worst:
                    layer_worst = rel
                if rel > worst[1]:
                    worst = (f"{name}[{i}] (seed {seed})", rel)
            per_layer[name] = layer_worst

    max_rel = max(per_layer.values())
    return GradCheckResult(
        passed=max_rel <= tol,
        max_rel_error=max_rel,
        max_abs_error=max_abs,
        worst_param=worst[0] if worst[0] else "none",
        per_layer=per_layer,
        seeds=tuple(seeds),
    )
