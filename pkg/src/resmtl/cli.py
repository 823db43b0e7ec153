"""Command-line surface: synth | train | eval | gradcheck | predict.

Every command is driven by a single JSON config document (``--config``)
with a ``version`` field; unknown keys are rejected and every field is
validated before any computation.  ``--seed`` overrides the config's seed
(precedence: flag > file > default).  The effective config, with defaults
merged and overrides applied, is written next to every artifact so a run
is reproducible from that file alone.

Exit codes: 0 success, 1 validation failure, 2 numeric abort during
training, 3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    CsvFormatError,
    Dataset,
    load_csv,
    normalize_targets,
    save_csv,
    split,
    synth_generate,
)
from .evalreport import emit_report, evaluate
from .gradcheck import gradient_check
from .losses import (
    CLASSIFICATION_TASKS,
    REGRESSION_TASKS,
    TASKS,
    TaskWeights,
    default_assignment,
    validate_assignment,
)
from .network import (
    build_network,
    head_specs_from,
    load_checkpoint,
    predict_heads,
    save_checkpoint,
)
from .numcore import RngState
from .optim import NanLossError, TrainConfig, train

CONFIG_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_GRADCHECK = 3


class ConfigError(ValueError):
    """Invalid run configuration."""


def default_config() -> dict:
    return {
        "version": CONFIG_VERSION,
        "seed": 0,
        "data": {
            "path": None,
            "image_width_px": 2048.0,
            "image_height_px": 2048.0,
            "size_divisor_mm": None,
            "split_fraction": None,
            "split_seed": None,
        },
        "network": {
            "hidden_dim": 512,
            "dropout_rate": 0.2,
        },
        "train": {
            "epochs": 200,
            "batch_size": 32,
            "learning_rate": 1e-4,
            "beta1": 0.9,
            "beta2": 0.999,
            "epsilon": 1e-8,
            "label_smoothing_alpha": 0.1,
            "smoothing_variant": "standard",
            "task_weights": {t: 1.0 for t in TASKS},
            "loss_assignment": None,
            "early_stop_patience": None,
        },
        "synth": {
            "num_samples": 256,
            "feature_dim": 32,
            "noise": 0.05,
            "class_counts": {"subtlety": 5, "state": 2, "z": 4, "diagnosis": 3},
            "priors": None,
            "missing_rate": 0.0,
            "size_range_mm": [3.0, 45.0],
        },
        "report": {
            "f1_average": "macro",
            "stratify": True,
        },
    }


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


_VALIDATORS = {
    ("version",): lambda v: v == CONFIG_VERSION,
    ("seed",): lambda v: isinstance(v, int) and v >= 0,
    ("data", "path"): lambda v: v is None or isinstance(v, str),
    ("data", "image_width_px"): lambda v: _is_number(v) and v > 0,
    ("data", "image_height_px"): lambda v: _is_number(v) and v > 0,
    ("data", "size_divisor_mm"): lambda v: v is None or (_is_number(v) and v > 0),
    ("data", "split_fraction"): lambda v: v is None or (_is_number(v) and 0 < v < 1),
    ("data", "split_seed"): lambda v: v is None or (isinstance(v, int) and v >= 0),
    ("network", "hidden_dim"): lambda v: isinstance(v, int) and v >= 1,
    ("network", "dropout_rate"): lambda v: _is_number(v) and 0 <= v < 1,
    ("train", "epochs"): lambda v: isinstance(v, int) and v >= 1,
    ("train", "batch_size"): lambda v: isinstance(v, int) and v >= 1,
    ("train", "learning_rate"): lambda v: _is_number(v) and v >= 0,
    ("train", "beta1"): lambda v: _is_number(v) and 0 <= v < 1,
    ("train", "beta2"): lambda v: _is_number(v) and 0 <= v < 1,
    ("train", "epsilon"): lambda v: _is_number(v) and v > 0,
    ("train", "label_smoothing_alpha"): lambda v: _is_number(v) and 0 <= v < 1,
    ("train", "smoothing_variant"): lambda v: v in ("standard", "printed"),
    ("train", "task_weights"): lambda v: isinstance(v, dict)
        and sorted(v) == sorted(TASKS)
        and all(_is_number(w) and w >= 0 for w in v.values()),
    ("train", "loss_assignment"): lambda v: v is None or (
        isinstance(v, dict) and all(k in TASKS for k in v)),
    ("train", "early_stop_patience"): lambda v: v is None
        or (isinstance(v, int) and v >= 1),
    ("synth", "num_samples"): lambda v: isinstance(v, int) and v >= 1,
    ("synth", "feature_dim"): lambda v: isinstance(v, int) and v >= 1,
    ("synth", "noise"): lambda v: _is_number(v) and v >= 0,
    ("synth", "class_counts"): lambda v: isinstance(v, dict)
        and sorted(v) == sorted(CLASSIFICATION_TASKS)
        and all(isinstance(c, int) and c >= 2 for c in v.values()),
    ("synth", "priors"): lambda v: v is None or isinstance(v, dict),
    ("synth", "missing_rate"): lambda v: _is_number(v) and 0 <= v < 1,
    ("synth", "size_range_mm"): lambda v: isinstance(v, list) and len(v) == 2
        and all(_is_number(x) for x in v) and 0 < v[0] < v[1],
    ("report", "f1_average"): lambda v: v in ("macro", "micro"),
    ("report", "stratify"): lambda v: isinstance(v, bool),
}


def validate_config(cfg: dict) -> None:
    defaults = default_config()
    unknown = set(cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for section, section_defaults in defaults.items():
        if section not in cfg:
            continue
        if isinstance(section_defaults, dict):
            if not isinstance(cfg[section], dict):
                raise ConfigError(f"config section {section!r} must be an object")
            bad = set(cfg[section]) - set(section_defaults)
            if bad:
                raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
    for path, check in _VALIDATORS.items():
        node = cfg
        for key in path:
            if not isinstance(node, dict) or key not in node:
                node = _MISSING
                break
            node = node[key]
        if node is _MISSING:
            continue
        if not check(node):
            raise ConfigError(f"invalid value for {'.'.join(path)}: {node!r}")


_MISSING = object()


def merge_config(file_cfg: dict | None, seed_flag: int | None) -> dict:
    """Defaults, overlaid by the config file, overlaid by flags."""
    cfg = default_config()
    if file_cfg is not None:
        validate_config(file_cfg)
        for section, value in file_cfg.items():
            if isinstance(value, dict) and isinstance(cfg.get(section), dict):
                cfg[section].update(copy.deepcopy(value))
            else:
                cfg[section] = copy.deepcopy(value)
    if seed_flag is not None:
        cfg["seed"] = seed_flag
    validate_config(cfg)
    return cfg


def load_config_file(path: str | None) -> dict | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return doc


def write_effective_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_dataset(cfg: dict) -> Dataset:
    path = cfg["data"]["path"]
    if path is None:
        raise ConfigError("data.path is not set")
    if not Path(path).exists():
        raise ConfigError(f"data file not found: {path}")
    ds = load_csv(
        path,
        image_width_px=cfg["data"]["image_width_px"],
        image_height_px=cfg["data"]["image_height_px"],
        size_divisor_mm=cfg["data"]["size_divisor_mm"],
    )
    return normalize_targets(ds)


def _split_dataset(ds: Dataset, cfg: dict, want: str) -> Dataset:
    fraction = cfg["data"]["split_fraction"]
    if fraction is None or want == "all":
        return ds
    seed = cfg["data"]["split_seed"]
    if seed is None:
        seed = cfg["seed"]
    train_ds, test_ds = split(ds, fraction, seed)
    return train_ds if want == "train" else test_ds


def _resolve_assignment(cfg: dict, ds: Dataset) -> dict[str, str]:
    assignment = cfg["train"]["loss_assignment"]
    if assignment is None:
        assignment = default_assignment(ds.vocab.num_classes("state"))
    else:
        assignment = dict(assignment)
        for task in TASKS:
            assignment.setdefault(
                task, default_assignment(ds.vocab.num_classes("state"))[task])
    validate_assignment(assignment, ds.vocab.class_counts())
    return assignment


def _checkpoint_extra(cfg: dict, ds: Dataset, assignment: dict[str, str]) -> dict:
    return {
        "feature_dim": ds.feature_dim,
        "vocab": ds.vocab.labels,
        "norm": {
            "image_width_px": ds.norm.image_width_px,
            "image_height_px": ds.norm.image_height_px,
            "size_divisor_mm": ds.norm.size_divisor_mm,
        },
        "loss_assignment": assignment,
    }


def cmd_synth(cfg: dict, out_dir: Path) -> int:
    s = cfg["synth"]
    ds = synth_generate(
        class_counts=s["class_counts"],
        n=s["num_samples"],
        feature_dim=s["feature_dim"],
        noise=s["noise"],
        seed=cfg["seed"],
        priors=s["priors"],
        missing_rate=s["missing_rate"],
        image_width_px=cfg["data"]["image_width_px"],
        image_height_px=cfg["data"]["image_height_px"],
        size_range_mm=tuple(s["size_range_mm"]),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "features.csv"
    save_csv(ds, out_path)
    write_effective_config(cfg, out_dir)
    print(f"wrote {len(ds)} samples, {ds.feature_dim} features -> {out_path}")
    return EXIT_OK


def cmd_train(cfg: dict, out_dir: Path) -> int:
    ds = _load_dataset(cfg)
    train_ds = _split_dataset(ds, cfg, "train")
    assignment = _resolve_assignment(cfg, train_ds)

    if all(w == 0.0 for w in cfg["train"]["task_weights"].values()):
        print("warning: all task weights are zero; parameters will not move",
              file=sys.stderr)

    rng = RngState(cfg["seed"], stream="init")
    specs = head_specs_from(ds.vocab.class_counts(), assignment)
    net = build_network(
        ds.feature_dim,
        cfg["network"]["hidden_dim"],
        cfg["network"]["dropout_rate"],
        specs,
        rng,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    t = cfg["train"]
    train_cfg = TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        seed=cfg["seed"],
        learning_rate=t["learning_rate"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        epsilon=t["epsilon"],
        dropout_rate=cfg["network"]["dropout_rate"],
        label_smoothing_alpha=t["label_smoothing_alpha"],
        smoothing_variant=t["smoothing_variant"],
        task_weights=TaskWeights(dict(t["task_weights"])),
        loss_assignment=assignment,
        early_stop_patience=t["early_stop_patience"],
        trace_path=str(out_dir / "trace.jsonl"),
    )
    trace = train(net, train_ds, train_cfg)

    ckpt_path = out_dir / "checkpoint.rmlc"
    save_checkpoint(net, ckpt_path, extra=_checkpoint_extra(cfg, ds, assignment))
    write_effective_config(cfg, out_dir)

    final = trace.epochs[-1]
    per_task = "  ".join(f"{t}={final.task_losses[t]:.6f}" for t in TASKS)
    print(f"epoch {final.epoch}: total={final.total_loss:.6f}  {per_task}")
    print(f"checkpoint -> {ckpt_path}")
    return EXIT_OK


def _check_compat(net, extra: dict, ds: Dataset) -> None:
    if ds.feature_dim != extra["feature_dim"]:
        raise ConfigError(
            f"feature width mismatch: checkpoint expects {extra['feature_dim']}, "
            f"data has {ds.feature_dim}")
    for task in CLASSIFICATION_TASKS:
        ckpt_labels = extra["vocab"][task]
        data_labels = ds.vocab.labels[task]
        if ckpt_labels != data_labels:
            raise ConfigError(
                f"vocab mismatch for task {task!r}: checkpoint has "
                f"{ckpt_labels}, data has {data_labels}")


def cmd_eval(cfg: dict, checkpoint: str, out_dir: Path, split_name: str) -> int:
    net, extra = load_checkpoint(checkpoint)
    ds = _load_dataset(cfg)
    if split_name == "auto":
        split_name = "test" if cfg["data"]["split_fraction"] is not None else "all"
    eval_ds = _split_dataset(ds, cfg, split_name)
    _check_compat(net, extra, eval_ds)

    report = evaluate(
        net, eval_ds,
        stratify=cfg["report"]["stratify"],
        f1_average=cfg["report"]["f1_average"],
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(emit_report(report, "json"), encoding="utf-8")
    (out_dir / "report.txt").write_text(emit_report(report, "text"), encoding="utf-8")
    write_effective_config(cfg, out_dir)
    print(emit_report(report, "text"))
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out_dir: Path | None) -> int:
    base = cfg["seed"]
    seeds = (base + 1, base + 2, base + 3) if base else (1, 2, 3)
    result = gradient_check(seeds=seeds)
    print(result.table())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "gradcheck.txt").write_text(result.table() + "\n", encoding="utf-8")
    if not result.passed:
        print(f"FAIL: max relative error {result.max_rel_error:.3e} > 1e-4 "
              f"at {result.worst_param}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"PASS: max relative error {result.max_rel_error:.3e} <= 1e-4")
    return EXIT_OK


def cmd_predict(checkpoint: str, features_path: str, out_dir: Path) -> int:
    net, extra = load_checkpoint(checkpoint)
    if not Path(features_path).exists():
        raise ConfigError(f"features file not found: {features_path}")
    ds = load_csv(features_path)
    if ds.feature_dim != extra["feature_dim"]:
        raise ConfigError(
            f"feature width mismatch: checkpoint expects {extra['feature_dim']}, "
            f"data has {ds.feature_dim}")
    vocab = extra["vocab"]
    norm = extra["norm"]
    divisors = {"x": norm["image_width_px"], "y": norm["image_height_px"],
                "size": norm["size_divisor_mm"] or 1.0}

    features = np.stack([r.features for r in ds.records])
    preds = predict_heads(net, features)

    header = ["id"]
    for task in CLASSIFICATION_TASKS:
        header += [f"{task}_pred", f"{task}_pred_label"]
        header += [f"{task}_p_{label}" for label in vocab[task]]
    header += ["x_px", "y_px", "size_mm"]

    lines = [",".join(header)]
    for i, rec in enumerate(ds.records):
        row = [rec.id]
        for task in CLASSIFICATION_TASKS:
            idx = int(preds[task]["indices"][i])
            row += [str(idx), vocab[task][idx]]
            row += [repr(float(p)) for p in preds[task]["probs"][i]]
        for task in REGRESSION_TASKS:
            row.append(repr(float(preds[task]["values"][i] * divisors[task])))
        lines.append(",".join(row))

    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "predictions.csv"
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(ds)} predictions -> {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resmtl",
        description="Residual multi-task learning engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required,
                       help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")

    common(sub.add_parser("synth", help="write a synthetic feature CSV"))
    common(sub.add_parser("train", help="train and write a checkpoint"),
           config_required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval, config_required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("auto", "train", "test", "all"),
                        default="auto")

    p_grad = sub.add_parser("gradcheck", help="verify backprop against finite "
                                              "differences")
    p_grad.add_argument("--config", default=None)
    p_grad.add_argument("--seed", type=int, default=None)
    p_grad.add_argument("--out", default=None)

    p_pred = sub.add_parser("predict", help="predict every task for a feature CSV")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--features", required=True)
    p_pred.add_argument("--out", default="out")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            cfg = merge_config(load_config_file(args.config), args.seed)
            return cmd_gradcheck(cfg, Path(args.out) if args.out else None)
        if args.command == "predict":
            return cmd_predict(args.checkpoint, args.features, Path(args.out))

        cfg = merge_config(load_config_file(args.config), args.seed)
        out_dir = Path(args.out)
        if args.command == "synth":
            return cmd_synth(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, out_dir, args.split)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, CsvFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NanLossError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
