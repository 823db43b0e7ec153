"""Shared-trunk multi-task network with a residual block and seven heads.

Architecture: input -> dense(input_dim, hidden) -> ReLU -> dropout ->
residual block -> one single-dense head per task.  The residual block
computes y = F(h) + h where F is dense -> ReLU -> dense on the trunk
width, so zeroing F's parameters makes the block an exact identity map.

Parameter ordering (relied on by the optimizer and the checkpoint format):
trunk, residual fc1, residual fc2, then heads in canonical task order
(subtlety, state, z, diagnosis, x, y, size); weights before bias within
each layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .losses import CLASSIFICATION_TASKS, TASKS
from .numcore import (
    Matrix,
    RngState,
    ShapeError,
    dropout_mask,
    he_init,
    matmul,
    matmul_at,
    matmul_bt,
    relu,
    relu_backward,
    softmax_rows,
)

CHECKPOINT_MAGIC = b"RMLC"
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    weights: Matrix  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: RngState) -> "DenseLayer":
        return cls(weights=he_init(in_dim, out_dim, rng), bias=np.zeros(out_dim))

    def forward(self, x: Matrix) -> Matrix:
        return matmul(x, self.weights) + self.bias


@dataclass
class ResidualBlock:
    """Two dense layers of equal width with ReLU between; skip adds the input."""

    fc1: DenseLayer
    fc2: DenseLayer

    @classmethod
    def init(cls, width: int, rng: RngState) -> "ResidualBlock":
        return cls(DenseLayer.init(width, width, rng), DenseLayer.init(width, width, rng))


@dataclass
class HeadSpec:
    name: str
    kind: str  # "classification" | "regression"
    out_dim: int  # logit columns; 1 for regression and for a binary BCE head
    num_classes: int | None = None  # classification only

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task name {self.name!r}")
        if self.kind == "classification":
            if self.num_classes is None or self.num_classes < 2:
                raise ValueError(f"classification head {self.name} needs >= 2 classes")
        elif self.kind == "regression":
            if self.out_dim != 1:
                raise ValueError(f"regression head {self.name} must emit exactly 1 value")
        else:
            raise ValueError(f"unknown head kind {self.kind!r}")


@dataclass
class MultiTaskNet:
    input_dim: int
    hidden_dim: int
    dropout_rate: float
    trunk: DenseLayer
    res: ResidualBlock
    head_specs: dict[str, HeadSpec]
    heads: dict[str, DenseLayer]


@dataclass
class ForwardCache:
    """Everything needed to compute exact gradients without re-running forward."""

    batch: Matrix
    trunk_pre: Matrix  # trunk dense output, pre-ReLU
    trunk_act: Matrix  # post-ReLU
    drop_mask: Matrix | None  # None in eval mode or rate 0
    res_in: Matrix  # input to the residual block
    res_pre: Matrix  # fc1 output, pre-ReLU
    res_act: Matrix  # post-ReLU
    trunk_out: Matrix  # residual block output feeding every head


def head_specs_from(
    class_counts: dict[str, int], assignment: dict[str, str]
) -> dict[str, HeadSpec]:
    """Derive the seven head shapes from class counts and the loss assignment.

    A binary-classification task trained with BCE-with-logits emits a single
    logit; CE heads emit one logit per class; an MSE-assigned classification
    task regresses the class index through a single output.
    """
    specs: dict[str, HeadSpec] = {}
    for task in TASKS:
        if task in CLASSIFICATION_TASKS:
            c = class_counts[task]
            kind = assignment[task]
            out_dim = c if kind == "label_smoothing_ce" else 1
            specs[task] = HeadSpec(task, "classification", out_dim, num_classes=c)
        else:
            specs[task] = HeadSpec(task, "regression", 1)
    return specs


def build_network(
    input_dim: int,
    hidden_dim: int,
    dropout_rate: float,
    head_specs: dict[str, HeadSpec],
    rng: RngState,
) -> MultiTaskNet:
    if set(head_specs) != set(TASKS):
        raise ValueError(f"need exactly the seven canonical heads, got {sorted(head_specs)}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    trunk = DenseLayer.init(input_dim, hidden_dim, rng)
    res = ResidualBlock.init(hidden_dim, rng)
    heads = {name: DenseLayer.init(hidden_dim, head_specs[name].out_dim, rng)
             for name in TASKS}
    return MultiTaskNet(
        input_dim=input_dim,
        hidden_dim=hidden_dim,
        dropout_rate=dropout_rate,
        trunk=trunk,
        res=res,
        head_specs={name: head_specs[name] for name in TASKS},
        heads=heads,
    )


def forward(
    net: MultiTaskNet,
    batch: Matrix,
    mode: str = "eval",
    rng: RngState | None = None,
) -> tuple[dict[str, Matrix], ForwardCache]:
    """Run the trunk, residual block, and all heads on one batch.

    Train mode applies an inverted-dropout mask after the trunk ReLU and
    consumes the RngState; eval mode is deterministic and uses no dropout.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(
            f"batch width {batch.shape[1] if batch.ndim == 2 else batch.shape} "
            f"does not match input_dim {net.input_dim}"
        )
    trunk_pre = net.trunk.forward(batch)
    trunk_act = relu(trunk_pre)
    mask = None
    if mode == "train" and net.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout needs an RngState")
        mask = dropout_mask(trunk_act.shape, net.dropout_rate, rng)
        res_in = trunk_act * mask
    else:
        res_in = trunk_act

    res_pre = net.res.fc1.forward(res_in)
    res_act = relu(res_pre)
    trunk_out = res_in + net.res.fc2.forward(res_act)  # skip connection

    outputs = {name: net.heads[name].forward(trunk_out) for name in TASKS}
    cache = ForwardCache(
        batch=batch,
        trunk_pre=trunk_pre,
        trunk_act=trunk_act,
        drop_mask=mask,
        res_in=res_in,
        res_pre=res_pre,
        res_act=res_act,
        trunk_out=trunk_out,
    )
    return outputs, cache


ParamGrads = dict[str, np.ndarray]


def _dense_backward(
    layer: DenseLayer, x: Matrix, upstream: Matrix, grads: ParamGrads, prefix: str
) -> Matrix:
    grads[f"{prefix}.weights"] = matmul_at(x, upstream)
    grads[f"{prefix}.bias"] = upstream.sum(axis=0)
    return matmul_bt(upstream, layer.weights)


def backward(net: MultiTaskNet, cache: ForwardCache, head_grads: dict[str, Matrix]) -> ParamGrads:
    """Exact gradients of the scalar implied by head_grads w.r.t. every parameter.

    The residual skip contributes the identity term: d(out)/d(in) = dF + I.
    """
    grads: ParamGrads = {}
    d_trunk_out = np.zeros_like(cache.trunk_out)
    for name in TASKS:
        g = head_grads[name]
        out_dim = net.head_specs[name].out_dim
        if g.shape != (cache.batch.shape[0], out_dim):
            raise ShapeError(
                f"head {name} gradient shape {g.shape} does not match output "
                f"({cache.batch.shape[0]}, {out_dim})"
            )
        d_trunk_out += _dense_backward(net.heads[name], cache.trunk_out, g, grads, f"head.{name}")

    # residual block: y = x + fc2(relu(fc1(x)))
    d_res_act = _dense_backward(net.res.fc2, cache.res_act, d_trunk_out, grads, "res.fc2")
    d_res_pre = relu_backward(cache.res_pre, d_res_act)
    d_res_in = _dense_backward(net.res.fc1, cache.res_in, d_res_pre, grads, "res.fc1")
    d_res_in = d_res_in + d_trunk_out  # identity path of the skip

    d_trunk_act = d_res_in if cache.drop_mask is None else d_res_in * cache.drop_mask
    d_trunk_pre = relu_backward(cache.trunk_pre, d_trunk_act)
    _dense_backward(net.trunk, cache.batch, d_trunk_pre, grads, "trunk")
    return grads


def parameters(net: MultiTaskNet) -> list[tuple[str, np.ndarray]]:
    """Stable (name, array) views in the documented order; arrays are the
    live parameters, so in-place updates train the network."""
    out: list[tuple[str, np.ndarray]] = [
        ("trunk.weights", net.trunk.weights),
        ("trunk.bias", net.trunk.bias),
        ("res.fc1.weights", net.res.fc1.weights),
        ("res.fc1.bias", net.res.fc1.bias),
        ("res.fc2.weights", net.res.fc2.weights),
        ("res.fc2.bias", net.res.fc2.bias),
    ]
    for name in TASKS:
        layer = net.heads[name]
        out.append((f"head.{name}.weights", layer.weights))
        out.append((f"head.{name}.bias", layer.bias))
    return out


def parameter_count(net: MultiTaskNet) -> int:
    return sum(arr.size for _, arr in parameters(net))


def zero_residual(net: MultiTaskNet) -> None:
    """Zero the residual block's inner parameters, making it the identity map."""
    for layer in (net.res.fc1, net.res.fc2):
        layer.weights[:] = 0.0
        layer.bias[:] = 0.0


# --------------------------------------------------------------------------
# inference helpers


def predict_heads(net: MultiTaskNet, batch: Matrix) -> dict[str, dict[str, np.ndarray]]:
    """Eval-mode predictions per head.

    Classification heads yield ``indices`` plus ``probs`` (rows sum to 1;
    a single-logit BCE head expands to [1-sigmoid, sigmoid]); regression
    heads yield ``values`` in normalized units.
    """
    outputs, _ = forward(net, batch, mode="eval")
    preds: dict[str, dict[str, np.ndarray]] = {}
    for name in TASKS:
        spec = net.head_specs[name]
        out = outputs[name]
        if spec.kind == "regression":
            preds[name] = {"values": out[:, 0]}
        elif spec.out_dim == 1:
            z = out[:, 0]
            e = np.exp(-np.abs(z))
            p1 = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            probs = np.stack([1.0 - p1, p1], axis=1)
            preds[name] = {"indices": (z >= 0).astype(np.int64), "probs": probs}
        elif spec.out_dim == spec.num_classes:
            probs = softmax_rows(out)
            preds[name] = {"indices": np.argmax(probs, axis=1), "probs": probs}
        else:
            # MSE-assigned classification head: round the single output
            idx = np.clip(np.rint(out[:, 0]), 0, spec.num_classes - 1).astype(np.int64)
            probs = np.zeros((out.shape[0], spec.num_classes))
            probs[np.arange(out.shape[0]), idx] = 1.0
            preds[name] = {"indices": idx, "probs": probs}
    return preds


# --------------------------------------------------------------------------
# checkpoint format: magic, u32 version, u64 header length, JSON header,
# then every parameter as raw 64-bit little-endian floats in the
# documented parameter order.


def _net_config(net: MultiTaskNet) -> dict:
    return {
        "input_dim": net.input_dim,
        "hidden_dim": net.hidden_dim,
        "dropout_rate": net.dropout_rate,
        "heads": [
            {
                "name": s.name,
                "kind": s.kind,
                "out_dim": s.out_dim,
                "num_classes": s.num_classes,
            }
            for s in (net.head_specs[t] for t in TASKS)
        ],
    }


def save_checkpoint(net: MultiTaskNet, path, extra: dict | None = None) -> None:
    """Write the network (config + parameters) plus optional extra metadata
    (for example the label vocabulary and normalization divisors)."""
    params = parameters(net)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": _net_config(net),
        "params": [{"name": n, "shape": list(a.shape)} for n, a in params],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in params:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MultiTaskNet, dict]:
    """Read a checkpoint; returns the network and the extra metadata dict."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        cfg = header["config"]
        specs = {
            h["name"]: HeadSpec(h["name"], h["kind"], h["out_dim"], h["num_classes"])
            for h in cfg["heads"]
        }
        net = build_network(
            cfg["input_dim"], cfg["hidden_dim"], cfg["dropout_rate"], specs, RngState(0)
        )
        by_name = dict(parameters(net))
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
            by_name[entry["name"]][:] = arr
    return net, header["extra"]
