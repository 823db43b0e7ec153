import json
from pathlib import Path

import numpy as np
import pytest

from resmtl.cli import (
    EXIT_GRADCHECK,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_VALIDATION,
    ConfigError,
    default_config,
    main,
    merge_config,
    validate_config,
)
from resmtl.data import load_csv
from resmtl.gradcheck import gradient_check
from resmtl.network import load_checkpoint, parameters


def fast_config(tmp_path, **overrides):
    """A config small enough for test-speed training runs."""
    cfg = {
        "version": 1,
        "seed": 42,
        "data": {"path": str(tmp_path / "features.csv")},
        "network": {"hidden_dim": 16, "dropout_rate": 0.0},
        "train": {"epochs": 120, "batch_size": 32, "learning_rate": 1e-2},
        "synth": {"num_samples": 64, "feature_dim": 32, "noise": 0.02,
                  "class_counts": {"subtlety": 3, "state": 2, "z": 3,
                                   "diagnosis": 3}},
    }
    for section, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(section, {}).update(value)
        else:
            cfg[section] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


def run(args):
    return main([str(a) for a in args])


class TestConfig:
    def test_defaults_validate(self):
        validate_config(default_config())

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            validate_config({"version": 1, "bogus": 1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys in 'train'"):
            validate_config({"version": 1, "train": {"momentum": 0.9}})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            validate_config({"version": 1, "train": {"epochs": 0}})

    def test_flag_overrides_file(self):
        merged = merge_config({"version": 1, "seed": 5}, seed_flag=9)
        assert merged["seed"] == 9

    def test_file_overrides_default(self):
        merged = merge_config({"version": 1, "train": {"epochs": 7}}, None)
        assert merged["train"]["epochs"] == 7
        assert merged["train"]["batch_size"] == 32  # default retained


class TestSynthCommand:
    def test_roundtrip_and_byte_identical(self, tmp_path):
        cfg = fast_config(tmp_path)
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        assert run(["synth", "--config", cfg, "--out", out1]) == EXIT_OK
        assert run(["synth", "--config", cfg, "--out", out2]) == EXIT_OK
        b1 = (out1 / "features.csv").read_bytes()
        b2 = (out2 / "features.csv").read_bytes()
        assert b1 == b2
        ds = load_csv(out1 / "features.csv")
        assert len(ds) == 64 and ds.feature_dim == 32
        assert ds.warnings == []

    def test_different_seed_differs(self, tmp_path):
        cfg = fast_config(tmp_path)
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        run(["synth", "--config", cfg, "--out", out1])
        run(["synth", "--config", cfg, "--seed", 7, "--out", out2])
        assert (out1 / "features.csv").read_bytes() != (out2 / "features.csv").read_bytes()
        assert json.loads((out2 / "config.json").read_text())["seed"] == 7


def synth_then(tmp_path, cfg_path):
    data_dir = tmp_path / "data"
    assert run(["synth", "--config", cfg_path, "--out", data_dir]) == EXIT_OK
    # point the config at the generated CSV
    cfg = json.loads(cfg_path.read_text())
    cfg["data"]["path"] = str(data_dir / "features.csv")
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
    return cfg_path


class TestTrainCommand:
    def test_train_writes_checkpoint_and_trace(self, tmp_path, capsys):
        cfg = synth_then(tmp_path, fast_config(tmp_path))
        out = tmp_path / "run"
        assert run(["train", "--config", cfg, "--out", out]) == EXIT_OK
        assert (out / "checkpoint.rmlc").exists()
        assert (out / "trace.jsonl").exists()
        assert (out / "config.json").exists()
        lines = (out / "trace.jsonl").read_text().strip().split("\n")
        assert len(lines) == 120
        printed = capsys.readouterr().out
        assert "total=" in printed

    def test_missing_data_file_exits_one_with_path(self, tmp_path, capsys):
        cfg = fast_config(tmp_path, data={"path": str(tmp_path / "nope.csv")})
        assert run(["train", "--config", cfg, "--out", tmp_path / "r"]) == EXIT_VALIDATION
        assert "nope.csv" in capsys.readouterr().err

    def test_all_zero_weights_warn_and_freeze(self, tmp_path, capsys):
        from resmtl.losses import TASKS

        cfg_path = synth_then(tmp_path, fast_config(
            tmp_path, train={"task_weights": {t: 0.0 for t in TASKS},
                             "epochs": 2, "batch_size": 32,
                             "learning_rate": 1e-2}))
        out = tmp_path / "run0"
        assert run(["train", "--config", cfg_path, "--out", out]) == EXIT_OK
        assert "warning" in capsys.readouterr().err.lower()
        # parameters equal a fresh initialization with the same seed
        from resmtl.data import normalize_targets
        from resmtl.losses import default_assignment
        from resmtl.network import build_network, head_specs_from
        from resmtl.numcore import RngState

        net, _ = load_checkpoint(out / "checkpoint.rmlc")
        cfg = json.loads(cfg_path.read_text())
        ds = normalize_targets(load_csv(cfg["data"]["path"]))
        fresh = build_network(
            ds.feature_dim, 16, 0.0,
            head_specs_from(ds.vocab.class_counts(), default_assignment(2)),
            RngState(42, stream="init"))
        for (n1, a), (n2, b) in zip(parameters(net), parameters(fresh)):
            assert np.array_equal(a, b), n1

    def test_rerun_from_effective_config_reproduces_bytes(self, tmp_path):
        # the config written next to the artifacts is a complete run
        # description: re-training from it yields the same checkpoint
        cfg = synth_then(tmp_path, fast_config(tmp_path))
        out1 = tmp_path / "r1"
        assert run(["train", "--config", cfg, "--out", out1]) == EXIT_OK
        out2 = tmp_path / "r2"
        assert run(["train", "--config", out1 / "config.json",
                    "--out", out2]) == EXIT_OK
        assert (out1 / "checkpoint.rmlc").read_bytes() == \
            (out2 / "checkpoint.rmlc").read_bytes()
        assert (out1 / "config.json").read_bytes() == \
            (out2 / "config.json").read_bytes()

    def test_state_under_mse_reading_trains(self, tmp_path):
        # the alternate assignment (state regressed through one output)
        # stays a valid configuration end to end
        assignment = {"subtlety": "label_smoothing_ce", "state": "mse",
                      "z": "label_smoothing_ce",
                      "diagnosis": "label_smoothing_ce",
                      "x": "mse", "y": "mse", "size": "mse"}
        cfg = synth_then(tmp_path, fast_config(
            tmp_path, train={"loss_assignment": assignment, "epochs": 60,
                             "batch_size": 32, "learning_rate": 1e-2}))
        out = tmp_path / "run"
        assert run(["train", "--config", cfg, "--out", out]) == EXIT_OK
        ev = tmp_path / "eval"
        assert run(["eval", "--config", cfg, "--checkpoint",
                    out / "checkpoint.rmlc", "--out", ev]) == EXIT_OK
        doc = json.loads((ev / "report.json").read_text())
        # still reported as a classification task, via rounded predictions
        assert "state" in doc["classification"]

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_nan_abort_exit_two(self, tmp_path, capsys):
        cfg = synth_then(tmp_path, fast_config(
            tmp_path, train={"learning_rate": 1e60, "epochs": 5,
                             "batch_size": 32}))
        code = run(["train", "--config", cfg, "--out", tmp_path / "boom"])
        assert code == EXIT_NUMERIC
        err = capsys.readouterr().err
        assert "epoch" in err


class TestEvalCommand:
    def test_eval_after_overfit_reaches_train_accuracy(self, tmp_path):
        cfg = synth_then(tmp_path, fast_config(tmp_path))
        out = tmp_path / "run"
        assert run(["train", "--config", cfg, "--out", out]) == EXIT_OK
        ev = tmp_path / "eval"
        assert run(["eval", "--config", cfg, "--checkpoint",
                    out / "checkpoint.rmlc", "--out", ev]) == EXIT_OK
        doc = json.loads((ev / "report.json").read_text())
        for task in ("subtlety", "state", "z", "diagnosis"):
            assert doc["classification"][task]["accuracy"] >= 0.95, task
        assert (ev / "report.txt").exists()

    def test_wrong_width_features_exit_one(self, tmp_path, capsys):
        cfg = synth_then(tmp_path, fast_config(tmp_path))
        out = tmp_path / "run"
        run(["train", "--config", cfg, "--out", out])
        # second dataset with a different feature width
        other_cfg = fast_config(tmp_path, synth={"feature_dim": 20,
                                                 "num_samples": 16,
                                                 "noise": 0.02,
                                                 "class_counts": {
                                                     "subtlety": 3, "state": 2,
                                                     "z": 3, "diagnosis": 3}})
        other_cfg = Path(str(other_cfg))
        narrow_dir = tmp_path / "narrow"
        run(["synth", "--config", other_cfg, "--out", narrow_dir])
        cfg_doc = json.loads(cfg.read_text())
        cfg_doc["data"]["path"] = str(narrow_dir / "features.csv")
        bad_cfg = tmp_path / "bad.json"
        bad_cfg.write_text(json.dumps(cfg_doc), encoding="utf-8")
        code = run(["eval", "--config", bad_cfg, "--checkpoint",
                    out / "checkpoint.rmlc", "--out", tmp_path / "e2"])
        assert code == EXIT_VALIDATION
        assert "width" in capsys.readouterr().err

    def test_stratified_only_when_sizes_exist(self, tmp_path):
        cfg = synth_then(tmp_path, fast_config(tmp_path, synth={
            "missing_rate": 0.99, "num_samples": 64, "feature_dim": 32,
            "noise": 0.02,
            "class_counts": {"subtlety": 3, "state": 2, "z": 3, "diagnosis": 3}}))
        # missing_rate < 1 keeps the odd record with size, so force all-missing
        data_path = json.loads(cfg.read_text())["data"]["path"]
        text = Path(data_path).read_text().split("\n")
        header, rows = text[0], [r for r in text[1:] if r]
        stripped = [",".join(r.split(",")[:-3] + ["", "", ""]) for r in rows]
        Path(data_path).write_text("\n".join([header] + stripped) + "\n")
        out = tmp_path / "run"
        assert run(["train", "--config", cfg, "--out", out]) == EXIT_OK
        ev = tmp_path / "eval"
        assert run(["eval", "--config", cfg, "--checkpoint",
                    out / "checkpoint.rmlc", "--out", ev]) == EXIT_OK
        doc = json.loads((ev / "report.json").read_text())
        assert doc["size_stratified"] is None


class TestGradcheckCommand:
    def test_default_passes(self, capsys):
        assert run(["gradcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS" in out
        assert "max rel error" in out  # per-layer table rendered

    def test_corrupted_backward_fails(self):
        result = gradient_check(seeds=(1,), corrupt_param="trunk.weights")
        assert not result.passed
        assert "trunk.weights" in result.worst_param

    def test_per_layer_table_lists_every_parameter(self):
        result = gradient_check(seeds=(1,))
        table = result.table()
        for name in ("trunk.weights", "res.fc1.weights", "head.size.bias"):
            assert name in table


class TestPredictCommand:
    def test_predictions_match_truth_after_overfit(self, tmp_path):
        cfg = synth_then(tmp_path, fast_config(tmp_path))
        out = tmp_path / "run"
        run(["train", "--config", cfg, "--out", out])
        data_path = json.loads(cfg.read_text())["data"]["path"]
        pr = tmp_path / "pred"
        assert run(["predict", "--checkpoint", out / "checkpoint.rmlc",
                    "--features", data_path, "--out", pr]) == EXIT_OK
        pred_lines = (pr / "predictions.csv").read_text().strip().split("\n")
        header = pred_lines[0].split(",")
        rows = [dict(zip(header, line.split(","))) for line in pred_lines[1:]]
        truth = load_csv(data_path)
        for task in ("subtlety", "state", "z", "diagnosis"):
            matches = sum(
                1 for rec, row in zip(truth.records, rows)
                if int(row[f"{task}_pred"]) == rec.class_index(task))
            assert matches / len(rows) >= 0.95, task
        # the label column agrees with the index column through the vocab
        for rec, row in zip(truth.records, rows):
            idx = int(row["subtlety_pred"])
            assert row["subtlety_pred_label"] == truth.vocab.label_of("subtlety", idx)

    def test_probabilities_sum_to_one(self, tmp_path):
        cfg = synth_then(tmp_path, fast_config(tmp_path))
        out = tmp_path / "run"
        run(["train", "--config", cfg, "--out", out])
        data_path = json.loads(cfg.read_text())["data"]["path"]
        pr = tmp_path / "pred"
        run(["predict", "--checkpoint", out / "checkpoint.rmlc",
             "--features", data_path, "--out", pr])
        lines = (pr / "predictions.csv").read_text().strip().split("\n")
        header = lines[0].split(",")
        for line in lines[1:]:
            row = dict(zip(header, line.split(",")))
            for task, labels in (("subtlety", ["1", "2", "3"]), ("state", ["nodule", "non-nodule"])):
                total = sum(float(row[f"{task}_p_{l}"]) for l in labels)
                assert abs(total - 1.0) < 1e-9

    def test_repeat_invocations_byte_identical(self, tmp_path):
        cfg = synth_then(tmp_path, fast_config(tmp_path))
        out = tmp_path / "run"
        run(["train", "--config", cfg, "--out", out])
        data_path = json.loads(cfg.read_text())["data"]["path"]
        p1, p2 = tmp_path / "p1", tmp_path / "p2"
        run(["predict", "--checkpoint", out / "checkpoint.rmlc",
             "--features", data_path, "--out", p1])
        run(["predict", "--checkpoint", out / "checkpoint.rmlc",
             "--features", data_path, "--out", p2])
        assert (p1 / "predictions.csv").read_bytes() == (p2 / "predictions.csv").read_bytes()

    def test_incompatible_checkpoint_exit_one(self, tmp_path, capsys):
        cfg = synth_then(tmp_path, fast_config(tmp_path))
        out = tmp_path / "run"
        run(["train", "--config", cfg, "--out", out])
        narrow_cfg = fast_config(tmp_path, synth={
            "feature_dim": 20, "num_samples": 8, "noise": 0.02,
            "class_counts": {"subtlety": 3, "state": 2, "z": 3, "diagnosis": 3}})
        nd = tmp_path / "narrow"
        run(["synth", "--config", narrow_cfg, "--out", nd])
        code = run(["predict", "--checkpoint", out / "checkpoint.rmlc",
                    "--features", nd / "features.csv", "--out", tmp_path / "px"])
        assert code == EXIT_VALIDATION
