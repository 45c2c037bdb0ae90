"""Plumbing smoke test: the consumer trains and evaluates on our output."""

import json
import subprocess

from conftest import CLASS_NAMES, consumer_binary
from msood_extractor import ExtractSpec, extract


def test_consumer_train_and_eval_run_on_extracted_bundle(toy_dataset, tmp_path):
    bundle = tmp_path / "bundle"
    extract(ExtractSpec(
        manifest=toy_dataset,
        out=bundle,
        class_names=list(CLASS_NAMES),
        n=2,
        encoder="toy-16",
    ))
    msood = consumer_binary()
    run_dir = tmp_path / "run"

    trained = subprocess.run(
        [msood, "train", "--bundle", str(bundle), "--out-dir", str(run_dir),
         "--epochs", "2", "--batch-size", "8", "--seed", "0"],
        capture_output=True, text=True,
    )
    assert trained.returncode == 0, trained.stdout + trained.stderr
    assert (run_dir / "checkpoint.bin").is_file()

    evaluated = subprocess.run(
        [msood, "eval", "--checkpoint", str(run_dir / "checkpoint.bin"),
         "--bundle", str(bundle), "--out-dir", str(run_dir)],
        capture_output=True, text=True,
    )
    assert evaluated.returncode == 0, evaluated.stdout + evaluated.stderr

    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert report["counts"] == {"id": 16, "ood": 4}
    assert report["ood_metrics_available"] is True
    assert report["auroc"] is not None

    scores = (run_dir / "scores.jsonl").read_text(encoding="utf-8")
    assert len(scores.strip().splitlines()) == 20
