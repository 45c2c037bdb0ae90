"""End-to-end extraction: consumer validation, pixel exactness, determinism."""

import hashlib
import json
import logging
import subprocess

import numpy as np
import pytest
from PIL import Image

from conftest import CLASS_NAMES, consumer_binary
from msood_extractor import (
    ExtractSpec,
    ManifestError,
    SpecError,
    extract,
    grid_regions,
    image_views,
    parent_index,
    patch_crops,
)
from msood_extractor.cli import main as cli_main

BICUBIC = Image.Resampling.BICUBIC


def toy_spec(manifest, out, **overrides):
    settings = dict(
        manifest=manifest,
        out=out,
        class_names=list(CLASS_NAMES),
        n=2,
        encoder="toy-16",
    )
    settings.update(overrides)
    return ExtractSpec(**settings)


def test_extracted_bundle_passes_consumer_validation(toy_dataset, tmp_path):
    spec = toy_spec(toy_dataset, tmp_path / "bundle")
    report = extract(spec)
    assert report.written == 20
    assert report.skipped == []
    assert report.d == 16
    proc = subprocess.run(
        [consumer_binary(), "validate", str(spec.out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "OK" in proc.stdout

    manifest = json.loads((spec.out / "manifest.json").read_text(encoding="utf-8"))
    labels = [row["label"] for row in manifest["items"]]
    assert labels == [0] * 8 + [1] * 8 + [-1] * 4


def test_view_stack_has_one_global_plus_both_grids(toy_dataset):
    image_path = toy_dataset.parent / "images" / "img-00.png"
    with Image.open(image_path) as image:
        views = image_views(image, n=2, input_size=16)
    assert views.shape == (1 + 4 + 16, 16, 16, 3)
    assert views.min() >= 0.0
    assert views.max() <= 1.0


def test_grid_crops_equal_pixel_slices_of_the_upsampled_image(toy_dataset):
    image_path = toy_dataset.parent / "images" / "img-01.png"
    with Image.open(image_path) as image:
        image = image.convert("RGB")
        width, height = image.size
        for factor in (2, 4):
            upsampled = np.asarray(
                image.resize((width * factor, height * factor), BICUBIC)
            )
            crops = patch_crops(image, factor)
            for region, crop in zip(grid_regions(width, height, factor), crops):
                slice_pixels = upsampled[
                    region.top:region.bottom, region.left:region.right
                ]
                assert np.array_equal(np.asarray(crop), slice_pixels)


def test_high_crops_equal_sub_slices_of_their_parent_cells(toy_dataset):
    n = 2
    image_path = toy_dataset.parent / "images" / "img-02.png"
    with Image.open(image_path) as image:
        image = image.convert("RGB")
        width, height = image.size
        upsampled = np.asarray(
            image.resize((width * 2 * n, height * 2 * n), BICUBIC)
        )
        mids = grid_regions(width, height, n)
        highs = grid_regions(width, height, 2 * n)
        high_crops = patch_crops(image, 2 * n)
        for j, (high, crop) in enumerate(zip(highs, high_crops)):
            parent = mids[parent_index(j, n)].scaled(2)
            assert parent.contains(high)
            parent_pixels = upsampled[
                parent.top:parent.bottom, parent.left:parent.right
            ]
            row0 = high.top - parent.top
            col0 = high.left - parent.left
            inside = parent_pixels[
                row0:row0 + high.height, col0:col0 + high.width
            ]
            assert np.array_equal(np.asarray(crop), inside)


def _bundle_digests(out):
    return {
        name: hashlib.sha256((out / name).read_bytes()).hexdigest()
        for name in ("manifest.json", "embeddings.bin", "text.bin")
    }


def test_rerun_produces_identical_bundle_bytes(toy_dataset, tmp_path):
    first = toy_spec(toy_dataset, tmp_path / "one")
    second = toy_spec(toy_dataset, tmp_path / "two")
    extract(first)
    extract(second)
    assert _bundle_digests(first.out) == _bundle_digests(second.out)


def test_unreadable_image_is_skipped_and_excluded(toy_dataset, tmp_path, caplog):
    (toy_dataset.parent / "images" / "img-03.png").write_bytes(b"not an image")
    spec = toy_spec(toy_dataset, tmp_path / "bundle")
    with caplog.at_level(logging.WARNING):
        report = extract(spec)
    assert report.written == 19
    assert report.skipped == ["images/img-03.png"]
    assert "skipping unreadable image" in caplog.text

    manifest = json.loads((spec.out / "manifest.json").read_text(encoding="utf-8"))
    ids = [row["id"] for row in manifest["items"]]
    assert "images/img-03.png" not in ids
    assert len(ids) == 19
    proc = subprocess.run(
        [consumer_binary(), "validate", str(spec.out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr


def test_unknown_label_fails_before_publishing(toy_dataset, tmp_path):
    broken = toy_dataset.parent / "broken.csv"
    broken.write_text(
        toy_dataset.read_text(encoding="utf-8") + "images/img-00.png,tumor\n",
        encoding="utf-8",
    )
    out = tmp_path / "bundle"
    with pytest.raises(ManifestError):
        extract(toy_spec(broken, out))
    assert not (out / "manifest.json").exists()


def test_duplicate_manifest_rows_are_rejected(toy_dataset, tmp_path):
    duplicated = toy_dataset.parent / "dup.csv"
    duplicated.write_text(
        toy_dataset.read_text(encoding="utf-8") + "images/img-00.png,normal\n",
        encoding="utf-8",
    )
    with pytest.raises(ManifestError):
        extract(toy_spec(duplicated, tmp_path / "bundle"))


def test_encoder_width_mismatch_is_a_hard_error(toy_dataset, tmp_path):
    with pytest.raises(SpecError):
        extract(toy_spec(toy_dataset, tmp_path / "bundle", expected_d=8))


def test_template_must_have_exactly_one_placeholder(toy_dataset, tmp_path):
    with pytest.raises(SpecError):
        toy_spec(toy_dataset, tmp_path / "a", template="a photo")
    with pytest.raises(SpecError):
        toy_spec(toy_dataset, tmp_path / "b",
                 template="[class] next to a [class]")


def test_settings_validation_rejects_bad_values(toy_dataset, tmp_path):
    with pytest.raises(SpecError):
        toy_spec(toy_dataset, tmp_path / "a", n=0)
    with pytest.raises(SpecError):
        toy_spec(toy_dataset, tmp_path / "b", batch_size=0)
    with pytest.raises(SpecError):
        toy_spec(toy_dataset, tmp_path / "c", class_names=["solo"])
    with pytest.raises(SpecError):
        toy_spec(toy_dataset, tmp_path / "d", class_names=["a", "a"])


def test_cli_writes_a_bundle_and_reports_counts(toy_dataset, tmp_path, capsys):
    out = tmp_path / "bundle"
    rc = cli_main([
        str(toy_dataset), "--out", str(out),
        "--classes", ",".join(CLASS_NAMES),
        "--encoder", "toy-16", "--n", "2",
    ])
    assert rc == 0
    captured = capsys.readouterr()
    assert "wrote bundle" in captured.out
    assert (out / "manifest.json").is_file()
    proc = subprocess.run(
        [consumer_binary(), "validate", str(out)], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr


def test_cli_rejects_bad_settings(toy_dataset, tmp_path, capsys):
    rc = cli_main([
        str(toy_dataset), "--out", str(tmp_path / "bundle"),
        "--classes", ",".join(CLASS_NAMES),
        "--encoder", "resnet-50",
    ])
    assert rc == 2
    assert "error:" in capsys.readouterr().err
