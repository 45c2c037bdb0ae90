"""Shared fixtures: a small deterministic image dataset on disk."""

import shutil

import numpy as np
import pytest
from PIL import Image

SIZES = [(24, 24), (20, 28), (28, 20), (32, 24)]
CLASS_NAMES = ["normal", "lesion"]


def _write_images(folder, count):
    folder.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        width, height = SIZES[i % len(SIZES)]
        rng = np.random.default_rng(100 + i)
        pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
        name = f"img-{i:02d}.png"
        Image.fromarray(pixels, "RGB").save(folder / name)
        names.append(f"images/{name}")
    return names


@pytest.fixture
def toy_dataset(tmp_path):
    """20 PNGs of mixed sizes with a CSV manifest: 8 + 8 labeled, 4 unlabeled."""
    names = _write_images(tmp_path / "images", 20)
    lines = ["path,label"]
    for i, name in enumerate(names):
        if i < 8:
            label = CLASS_NAMES[0]
        elif i < 16:
            label = CLASS_NAMES[1]
        else:
            label = "-1"
        lines.append(f"{name},{label}")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def consumer_binary() -> str:
    """Path of the installed msood console script, required as test oracle."""
    path = shutil.which("msood")
    if path is None:
        pytest.fail(
            "these tests drive the msood command-line tool as their oracle; "
            "install the msood package first"
        )
    return path
