"""Tests for the command-line interface and its exit codes."""

import json
import shutil
import subprocess

import numpy as np
import pytest

from msood.bundle import SyntheticSpec, generate_synthetic, write_bundle
from msood.cli import main
from msood.config import TrainConfig, config_hash
from msood.trainer import load_checkpoint


@pytest.fixture()
def bundle_dir(tmp_path):
    spec = SyntheticSpec(d=8, n=2, num_classes=3, per_class=5, ood_count=4)
    bundle = generate_synthetic(spec, seed=11)
    path = tmp_path / "bundle"
    write_bundle(bundle, path)
    return path


def train_args(bundle_dir, out_dir, *extra):
    return [
        "train",
        "--bundle", str(bundle_dir),
        "--out-dir", str(out_dir),
        "--epochs", "2",
        "--batch-size", "4",
        "--tau", "0.25",
        "--k", "2",
        *extra,
    ]


class TestSynthValidate:
    def test_synth_then_validate(self, tmp_path, capsys):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(
            {"d": 6, "n": 2, "num_classes": 2, "per_class": 3, "ood_count": 2}
        ))
        out = tmp_path / "bundle"
        assert main(["synth", "--spec", str(spec_path), "--out", str(out),
                     "--seed", "5"]) == 0
        assert main(["validate", str(out)]) == 0
        output = capsys.readouterr().out
        assert "8 items (6 labeled, 2 outliers)" in output
        assert "OK" in output

    def test_synth_unknown_key(self, tmp_path, capsys):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"d": 6, "n": 2, "num_classes": 2,
                                         "per_class": 3, "ood_count": 2,
                                         "dimension": 4}))
        assert main(["synth", "--spec", str(spec_path),
                     "--out", str(tmp_path / "b")]) == 2
        assert "dimension" in capsys.readouterr().err

    def test_synth_invalid_value(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"d": 6, "n": 2, "num_classes": 1,
                                         "per_class": 3, "ood_count": 2}))
        assert main(["synth", "--spec", str(spec_path),
                     "--out", str(tmp_path / "b")]) == 2

    def test_validate_corrupted_bundle(self, bundle_dir, capsys):
        embeddings = bundle_dir / "embeddings.bin"
        embeddings.write_bytes(embeddings.read_bytes()[:-8])
        assert main(["validate", str(bundle_dir)]) == 2
        assert "error" in capsys.readouterr().err

    def test_validate_missing_dir(self, tmp_path):
        assert main(["validate", str(tmp_path / "nope")]) == 2


class TestTrain:
    def test_writes_artifacts(self, bundle_dir, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(train_args(bundle_dir, out, "--seed", "3")) == 0
        assert (out / "checkpoint.bin").exists()
        log_lines = (out / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 2
        run_config = json.loads((out / "run_config.json").read_text())
        cfg = TrainConfig.from_dict(run_config["config"])
        assert cfg.epochs == 2
        assert cfg.seed == 3
        assert run_config["config_hash"] == config_hash(cfg)
        output = capsys.readouterr().out
        assert "epoch 0" in output
        assert "saved checkpoint" in output

    def test_cli_overrides_config_file(self, bundle_dir, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"epochs": 9, "tau": 0.25, "k": 2,
                                        "batch_size": 4}))
        out = tmp_path / "run"
        assert main(["train", "--bundle", str(bundle_dir),
                     "--out-dir", str(out), "--config", str(cfg_path),
                     "--epochs", "1"]) == 0
        run_config = json.loads((out / "run_config.json").read_text())
        assert run_config["config"]["epochs"] == 1
        assert run_config["config"]["tau"] == 0.25

    def test_ablation_flag(self, bundle_dir, tmp_path):
        out = tmp_path / "run"
        assert main(train_args(bundle_dir, out, "--disable-ood-loss")) == 0
        run_config = json.loads((out / "run_config.json").read_text())
        assert run_config["config"]["ablations"]["disable_ood_loss"] is True
        log = [json.loads(line)
               for line in (out / "train_log.jsonl").read_text().splitlines()]
        assert all(record["l_ood"] == 0.0 for record in log)

    def test_stop_and_resume_matches_straight_run(self, bundle_dir, tmp_path):
        straight = tmp_path / "straight"
        assert main(train_args(bundle_dir, straight)) == 0

        stepwise = tmp_path / "stepwise"
        assert main(train_args(bundle_dir, stepwise, "--stop-after", "1")) == 0
        assert main(train_args(
            bundle_dir, stepwise,
            "--resume", str(stepwise / "checkpoint.bin"),
        )) == 0

        assert (stepwise / "checkpoint.bin").read_bytes() == (
            straight / "checkpoint.bin"
        ).read_bytes()
        assert (stepwise / "train_log.jsonl").read_text() == (
            straight / "train_log.jsonl"
        ).read_text()

    def test_grid_mismatch(self, bundle_dir, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"n": 1, "k": 2, "epochs": 1,
                                        "batch_size": 4, "tau": 0.25}))
        assert main(["train", "--bundle", str(bundle_dir),
                     "--out-dir", str(tmp_path / "run"),
                     "--config", str(cfg_path)]) == 2

    def test_missing_bundle(self, tmp_path):
        assert main(["train", "--bundle", str(tmp_path / "nope"),
                     "--out-dir", str(tmp_path / "run")]) == 2


class TestEvalScore:
    @pytest.fixture()
    def checkpoint(self, bundle_dir, tmp_path):
        out = tmp_path / "run"
        assert main(train_args(bundle_dir, out)) == 0
        return out / "checkpoint.bin"

    def test_eval_writes_report(self, bundle_dir, checkpoint, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(checkpoint),
                     "--bundle", str(bundle_dir), "--out-dir", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report) == {"acc", "fpr95", "auroc", "ood_metrics_available",
                               "counts", "threshold_used", "config_hash"}
        assert report["counts"] == {"id": 15, "ood": 4}
        scores = (out / "scores.jsonl").read_text().splitlines()
        assert len(scores) == 19
        output = capsys.readouterr().out
        assert "auroc" in output

    def test_eval_without_out_dir(self, bundle_dir, checkpoint, capsys):
        assert main(["eval", "--checkpoint", str(checkpoint),
                     "--bundle", str(bundle_dir)]) == 0
        assert "acc" in capsys.readouterr().out

    def test_eval_shape_mismatch(self, checkpoint, tmp_path):
        other = generate_synthetic(
            SyntheticSpec(d=6, n=2, num_classes=3, per_class=3, ood_count=1),
            seed=1,
        )
        other_dir = tmp_path / "other"
        write_bundle(other, other_dir)
        assert main(["eval", "--checkpoint", str(checkpoint),
                     "--bundle", str(other_dir)]) == 2

    def test_eval_missing_checkpoint(self, bundle_dir, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope.bin"),
                     "--bundle", str(bundle_dir)]) == 2

    def test_score_writes_jsonl(self, bundle_dir, checkpoint, tmp_path):
        out = tmp_path / "scores.jsonl"
        assert main(["score", "--checkpoint", str(checkpoint),
                     "--bundle", str(bundle_dir), "--out", str(out)]) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 19
        assert set(rows[0]) == {"id", "label", "predicted", "msp"}

    def test_checkpoint_round_trips_through_cli(self, checkpoint):
        state, cfg = load_checkpoint(checkpoint)
        assert state.params.w.shape == (8, 8)
        assert cfg.epochs == 2
        assert np.any(state.params.w != 0.0)


class TestGradcheck:
    def test_passes_at_defaults(self, capsys):
        assert main(["gradcheck", "--seeds", "2"]) == 0
        output = capsys.readouterr().out
        assert "max relative error" in output
        assert "OK" in output

    def test_corrupted_gradient_fails(self, capsys):
        assert main(["gradcheck", "--seeds", "1", "--corrupt", "0.1"]) == 4
        assert "FAIL" in capsys.readouterr().out

    def test_invalid_dims(self):
        assert main(["gradcheck", "--num-classes", "1"]) == 2


class TestEntryPoint:
    def test_console_script_runs(self, bundle_dir):
        exe = shutil.which("msood")
        assert exe is not None
        proc = subprocess.run(
            [exe, "validate", str(bundle_dir)],
            capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == 0
        assert "OK" in proc.stdout
