"""Dataset manifest reading: one image path and one label per row.

Two formats are accepted, chosen by file extension:

``.csv``
    A header row naming at least ``path`` and ``label`` columns; extra
    columns are ignored with a warning.

``.json``
    A list of objects, each with ``path`` and ``label`` keys.

Relative image paths are resolved against the manifest file's directory.
Labels stay raw strings here; ``resolve_label`` maps one onto a class
list, accepting either a class name or an integer index (-1 marks an
unlabeled or out-of-distribution row).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import ManifestError

logger = logging.getLogger(__name__)

__all__ = ["DatasetRow", "read_dataset_manifest", "resolve_label"]


@dataclass(frozen=True)
class DatasetRow:
    """One dataset entry: resolved image path and raw label token."""

    path: Path
    label: str


def _rows_from_csv(path: Path) -> list[dict]:
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty file, expected a header row")
        missing = {"path", "label"} - set(reader.fieldnames)
        if missing:
            raise ManifestError(
                f"{path}: header lacks required column(s) {sorted(missing)}"
            )
        extra = [name for name in reader.fieldnames if name not in ("path", "label")]
        if extra:
            logger.warning("%s: ignoring extra column(s) %s", path, extra)
        return list(reader)


def _rows_from_json(path: Path) -> list[dict]:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{path}: not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise ManifestError(f"{path}: top level must be a JSON list")
    for i, row in enumerate(raw):
        if not isinstance(row, dict):
            raise ManifestError(f"{path}: row {i} is not an object")
    return raw


def read_dataset_manifest(path: str | Path) -> list[DatasetRow]:
    """Parse a dataset manifest into rows, preserving order."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"no such manifest: {path}")
    suffix = path.suffix.lower()
    if suffix == ".csv":
        raw_rows = _rows_from_csv(path)
    elif suffix == ".json":
        raw_rows = _rows_from_json(path)
    else:
        raise ManifestError(
            f"{path}: unsupported manifest extension {suffix!r}, "
            "expected .csv or .json"
        )
    if not raw_rows:
        raise ManifestError(f"{path}: manifest has no rows")

    base = path.parent
    rows: list[DatasetRow] = []
    for i, raw in enumerate(raw_rows):
        image = raw.get("path")
        if not isinstance(image, str) or not image.strip():
            raise ManifestError(f"{path}: row {i} has no image path")
        label = raw.get("label")
        if label is None:
            raise ManifestError(f"{path}: row {i} has no label")
        image_path = Path(image.strip())
        if not image_path.is_absolute():
            image_path = base / image_path
        rows.append(DatasetRow(path=image_path, label=str(label).strip()))
    return rows


def resolve_label(token: str, class_names: list[str]) -> int:
    """Map a raw label token onto a class index.

    A token equal to a class name gives that class's index; an integer
    token must be -1 or a valid index. Anything else is an error.
    """
    if token in class_names:
        return class_names.index(token)
    try:
        value = int(token, 10)
    except ValueError:
        raise ManifestError(
            f"label {token!r} is neither a class name in {class_names} "
            "nor an integer index"
        ) from None
    if value != -1 and not 0 <= value < len(class_names):
        raise ManifestError(
            f"label index {value} out of range: expected -1 or "
            f"0..{len(class_names) - 1}"
        )
    return value
