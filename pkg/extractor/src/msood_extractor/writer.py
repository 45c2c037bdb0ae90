"""Embedding bundle writing: manifest plus float32 little-endian tensors.

The output directory holds three files. ``manifest.json`` carries the
dimensions, class names, and one ``{"id", "label", "offset"}`` row per
item. ``embeddings.bin`` holds one record per item in manifest order,
``(1 + n^2 + 4 n^2) * d`` float32 little-endian values laid out as the
global vector, then mid patches row-major, then high patches row-major.
``text.bin`` holds ``num_classes`` rows of ``d`` float32 values in class
order. This layout is written directly from this module so the package
works against the consumer's published file format alone, without
importing the consumer.

``BundleWriter`` appends items in call order with a single writer and
stages everything in temporary files; the real names appear only when
``finalize`` runs, so an interrupted extraction never leaves a directory
that looks like a valid bundle.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import WriteError

__all__ = ["BundleWriter"]

MANIFEST_NAME = "manifest.json"
EMBEDDINGS_NAME = "embeddings.bin"
TEXT_NAME = "text.bin"
BUNDLE_VERSION = 1


def _clean_array(name: str, array: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    if array.shape != shape:
        raise WriteError(f"{name} must have shape {shape}, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise WriteError(f"{name} contains non-finite values")
    return array


class BundleWriter:
    """Single-writer, append-in-order bundle builder.

    Usable as a context manager: leaving the block on an exception
    removes the staged temporary files.
    """

    def __init__(self, out_dir: str | Path, d: int, n: int,
                 class_names: list[str]) -> None:
        if d < 1 or n < 1:
            raise WriteError(f"need d >= 1 and n >= 1, got d={d}, n={n}")
        if len(class_names) < 2:
            raise WriteError(
                f"the bundle format needs at least two classes, "
                f"got {len(class_names)}"
            )
        if len(set(class_names)) != len(class_names):
            raise WriteError("class names must be unique")
        if not all(isinstance(name, str) and name for name in class_names):
            raise WriteError("class names must be nonempty strings")
        self.out_dir = Path(out_dir)
        self.d = d
        self.n = n
        self.class_names = list(class_names)
        self.record_bytes = (1 + 5 * n * n) * d * 4
        self._rows: list[dict] = []
        self._ids: set[str] = set()
        self._text_written = False
        self._finalized = False
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._emb_tmp = self.out_dir / (EMBEDDINGS_NAME + ".tmp")
        self._text_tmp = self.out_dir / (TEXT_NAME + ".tmp")
        self._emb_handle = self._emb_tmp.open("wb")

    def __enter__(self) -> "BundleWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None or not self._finalized:
            self.abort()

    def add_item(self, item_id: str, label: int, v_global: np.ndarray,
                 v_mid: np.ndarray, v_high: np.ndarray) -> None:
        """Append one item's record; offsets accrue in call order."""
        if self._finalized:
            raise WriteError("writer is already finalized")
        if not item_id:
            raise WriteError("item id must be nonempty")
        if item_id in self._ids:
            raise WriteError(f"duplicate item id {item_id!r}")
        if label != -1 and not 0 <= label < len(self.class_names):
            raise WriteError(
                f"item {item_id!r}: label {label} out of range, expected -1 "
                f"or 0..{len(self.class_names) - 1}"
            )
        d, n_sq = self.d, self.n * self.n
        v_global = _clean_array(f"item {item_id!r} global", v_global, (d,))
        v_mid = _clean_array(f"item {item_id!r} mid", v_mid, (n_sq, d))
        v_high = _clean_array(f"item {item_id!r} high", v_high, (4 * n_sq, d))
        record = np.concatenate(
            [v_global, v_mid.reshape(-1), v_high.reshape(-1)]
        ).astype("<f4")
        offset = len(self._rows) * self.record_bytes
        self._emb_handle.write(record.tobytes())
        self._ids.add(item_id)
        self._rows.append({"id": item_id, "label": int(label), "offset": offset})

    def write_text(self, rows: np.ndarray) -> None:
        """Write the class text embeddings, one row per class."""
        if self._finalized:
            raise WriteError("writer is already finalized")
        rows = _clean_array("text rows", rows, (len(self.class_names), self.d))
        self._text_tmp.write_bytes(rows.astype("<f4").tobytes())
        self._text_written = True

    def finalize(self) -> None:
        """Close the binary files and publish the manifest."""
        if self._finalized:
            raise WriteError("writer is already finalized")
        if not self._text_written:
            raise WriteError("finalize called before write_text")
        self._emb_handle.close()
        os.replace(self._emb_tmp, self.out_dir / EMBEDDINGS_NAME)
        os.replace(self._text_tmp, self.out_dir / TEXT_NAME)
        doc = {
            "version": BUNDLE_VERSION,
            "d": self.d,
            "n": self.n,
            "num_classes": len(self.class_names),
            "class_names": self.class_names,
            "items": self._rows,
        }
        manifest_tmp = self.out_dir / (MANIFEST_NAME + ".tmp")
        manifest_tmp.write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        os.replace(manifest_tmp, self.out_dir / MANIFEST_NAME)
        self._finalized = True

    def abort(self) -> None:
        """Drop staged files, leaving any previously published bundle alone."""
        if not self._emb_handle.closed:
            self._emb_handle.close()
        self._emb_tmp.unlink(missing_ok=True)
        self._text_tmp.unlink(missing_ok=True)
