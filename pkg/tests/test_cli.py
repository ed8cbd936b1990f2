import csv
import json

import pytest

from advcorr.checkpoint import load_checkpoint
from advcorr.cli import main

BASE_CONFIG = {
    "seed": 5,
    "threads": 1,
    "dataset": {
        "kind": "synthetic",
        "generator": "gaussian_blobs",
        "n_per_class": 40,
        "noise_std": 0.09,
        "input_dim": 2,
        "num_classes": 3,
        "test_fraction": 0.25,
    },
    "architecture": {"hidden": [16]},
    "train": {"epochs": 8, "batch_size": 16, "learning_rate": 0.01},
    "attack": {"kind": "pgd", "epsilon": 0.15, "step_size": 0.03, "iterations": 12},
    "attack_size": 6,
    "finetune": {"max_iterations": 2, "omega": 0.2, "qp_tol": 1e-10,
                 "qp_max_sweeps": 20000},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file plus pretrain and attack outputs shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(BASE_CONFIG))
    pre = root / "pretrain"
    assert main(["pretrain", "--config", str(config), "--out", str(pre)]) == 0
    atk = root / "attack"
    assert main(["attack", "--config", str(config), "--out", str(atk),
                 "--checkpoint", str(pre / "checkpoint.json")]) == 0
    return {"root": root, "config": config, "pretrain": pre, "attack": atk}


class TestPretrain:
    def test_outputs(self, workspace):
        pre = workspace["pretrain"]
        assert (pre / "checkpoint.json").exists()
        assert (pre / "resolved_config.json").exists()
        doc = json.loads((pre / "metrics.json").read_text())
        for key in ("loss", "clean_acc", "fgsm_acc", "pgd_acc"):
            assert isinstance(doc["metrics"][key], float)
        assert doc["config"]["seed"] == 5
        net, meta = load_checkpoint(pre / "checkpoint.json", with_meta=True)
        assert meta["run_config"]["attack"]["epsilon"] == 0.15
        assert "dataset_checksum" in meta

    def test_missing_dataset_path_names_it(self, tmp_path, capsys):
        cfg = dict(BASE_CONFIG)
        cfg["dataset"] = {"kind": "mnist",
                          "train_images": "/nope/train-images.idx",
                          "train_labels": "/nope/train-labels.idx",
                          "test_images": "/nope/t10k-images.idx",
                          "test_labels": "/nope/t10k-labels.idx"}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        code = main(["pretrain", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 3
        assert "/nope/train-images.idx" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = dict(BASE_CONFIG)
        cfg["learning"] = {"rate": 1.0}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert main(["pretrain", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "learning" in capsys.readouterr().err


class TestAttack:
    def test_outputs_and_quota(self, workspace):
        doc = json.loads((workspace["attack"] / "adversarial.json").read_text())
        assert len(doc["examples"]) == 6
        labels = [e["y"] for e in doc["examples"]]
        assert labels == [0, 0, 1, 1, 2, 2]
        assert doc["epsilon"] == 0.15
        assert doc["model_checksum"]

    def test_regeneration_is_byte_identical(self, workspace, tmp_path):
        out2 = tmp_path / "again"
        assert main(["attack", "--config", str(workspace["config"]),
                     "--out", str(out2),
                     "--checkpoint", str(workspace["pretrain"] / "checkpoint.json")]) == 0
        a = (workspace["attack"] / "adversarial.json").read_bytes()
        b = (out2 / "adversarial.json").read_bytes()
        assert a == b

    def test_indivisible_size_is_config_error(self, workspace, tmp_path):
        code = main(["attack", "--config", str(workspace["config"]),
                     "--out", str(tmp_path / "o"), "--size", "7",
                     "--checkpoint", str(workspace["pretrain"] / "checkpoint.json")])
        assert code == 2


class TestFinetune:
    def test_end_to_end(self, workspace, tmp_path, capsys):
        out = tmp_path / "ft"
        code = main(["finetune", "--config", str(workspace["config"]),
                     "--out", str(out),
                     "--checkpoint", str(workspace["pretrain"] / "checkpoint.json"),
                     "--adv", str(workspace["attack"] / "adversarial.json")])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "before fine-tuning" in stdout and "after fine-tuning" in stdout

        with open(out / "history.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "k"
        assert len(rows) - 1 <= 2  # at most max_iterations data rows
        tuned = load_checkpoint(out / "finetuned.json")
        assert tuned.num_classes == 3
        metrics = json.loads((out / "finetune_metrics.json").read_text())
        assert metrics["after"]["violation"] <= metrics["before"]["violation"]
        pool = json.loads((out / "pool.json").read_text())
        assert all("parameters" not in entry for entry in pool)

    def test_omega_override_changes_selection_record(self, workspace, tmp_path):
        out = tmp_path / "ft0"
        code = main(["finetune", "--config", str(workspace["config"]),
                     "--out", str(out), "--omega", "0.0", "--iters", "1",
                     "--checkpoint", str(workspace["pretrain"] / "checkpoint.json"),
                     "--adv", str(workspace["attack"] / "adversarial.json")])
        assert code == 0
        cfg = json.loads((out / "resolved_config.json").read_text())
        assert cfg["finetune"]["omega"] == 0.0
        assert cfg["finetune"]["max_iterations"] == 1

    def test_checksum_mismatch_refused(self, workspace, tmp_path, capsys):
        other = tmp_path / "other"
        assert main(["pretrain", "--config", str(workspace["config"]),
                     "--out", str(other), "--seed", "99"]) == 0
        code = main(["finetune", "--config", str(workspace["config"]),
                     "--out", str(tmp_path / "o"),
                     "--checkpoint", str(other / "checkpoint.json"),
                     "--adv", str(workspace["attack"] / "adversarial.json")])
        assert code == 3
        assert "different model" in capsys.readouterr().err


class TestBaselineRetrain:
    def test_report_has_deltas(self, workspace, tmp_path, capsys):
        out = tmp_path / "bl"
        code = main(["baseline-retrain", "--config", str(workspace["config"]),
                     "--out", str(out),
                     "--checkpoint", str(workspace["pretrain"] / "checkpoint.json"),
                     "--adv", str(workspace["attack"] / "adversarial.json")])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "(" in stdout and ")" in stdout  # parenthesized deltas
        doc = json.loads((out / "baseline_metrics.json").read_text())
        assert set(doc) == {"pretrained", "retrained", "config"}

    def test_deterministic(self, workspace, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["baseline-retrain", "--config", str(workspace["config"]),
                         "--out", str(out),
                         "--checkpoint", str(workspace["pretrain"] / "checkpoint.json"),
                         "--adv", str(workspace["attack"] / "adversarial.json")]) == 0
            outs.append((out / "baseline_checkpoint.json").read_bytes())
        assert outs[0] == outs[1]


class TestEval:
    def test_runs(self, workspace, tmp_path):
        out = tmp_path / "ev"
        code = main(["eval", "--config", str(workspace["config"]),
                     "--out", str(out),
                     "--checkpoint", str(workspace["pretrain"] / "checkpoint.json")])
        assert code == 0
        doc = json.loads((out / "eval_metrics.json").read_text())
        assert 0.0 <= doc["metrics"]["clean_acc"] <= 1.0
