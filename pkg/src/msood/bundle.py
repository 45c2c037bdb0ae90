"""Embedding bundle storage: manifest + binary tensors, and a synthetic generator.

A bundle is a directory with three files:

``manifest.json``
    UTF-8 JSON: ``version`` (currently 1), ``d`` (embedding width), ``n``
    (partition factor), ``num_classes``, ``class_names`` (length
    ``num_classes``), and ``items``, a list of ``{"id", "label", "offset"}``
    records.  ``label`` is -1 for unlabeled/OOD items, otherwise a class
    index.  ``offset`` is the byte offset of the item's record in
    ``embeddings.bin``.  Unknown keys are ignored with a warning.

``embeddings.bin``
    One record per item: ``(1 + n^2 + 4 n^2) * d`` float32 little-endian
    values, in order global vector, mid patches row-major, high patches
    row-major.

``text.bin``
    ``num_classes * d`` float32 little-endian values, one row per class in
    ``class_names`` order.

Files store float32; everything in memory is float64.  The synthetic
generator quantizes its output through float32 so that a write/load round
trip is the identity.

Determinism: synthesis uses the Philox 4x64 counter-based bit generator
keyed by the seed, with Gaussians produced by an explicit Box-Muller
transform over its uniform doubles, so identical (spec, seed) pairs yield
bitwise-identical bundles on any platform.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, TruncationError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
EMBEDDINGS_NAME = "embeddings.bin"
TEXT_NAME = "text.bin"
BUNDLE_VERSION = 1

_MANIFEST_KEYS = {"version", "d", "n", "num_classes", "class_names", "items"}
_ITEM_KEYS = {"id", "label", "offset"}


@dataclass
class ItemMeta:
    """One manifest row: item id, label (-1 for OOD/unlabeled), byte offset."""

    item_id: str
    label: int
    offset: int


@dataclass
class BundleManifest:
    """Parsed manifest for a bundle directory."""

    d: int
    n: int
    num_classes: int
    class_names: list[str]
    items: list[ItemMeta]
    version: int = BUNDLE_VERSION


@dataclass
class ImageEmbeddings:
    """Frozen-encoder embeddings for one image at three scales (float64)."""

    item_id: str
    label: int
    v_global: np.ndarray  # (d,)
    v_mid: np.ndarray     # (n^2, d), row-major patch order
    v_high: np.ndarray    # (4 n^2, d), row-major patch order


@dataclass
class TextBank:
    """Class text embeddings as a (d, C) matrix, one column per class."""

    t_base: np.ndarray


@dataclass
class Bundle:
    """A fully loaded bundle."""

    manifest: BundleManifest
    items: list[ImageEmbeddings]
    text: TextBank


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic embedding generator.

    ID items are drawn per class: the global vector near the class anchor,
    each patch near the class anchor with probability ``lesion_fraction``
    and near a shared tissue anchor otherwise.  OOD items use an anchor
    interpolated between two distinct class anchors (near-OOD), with the
    same patch procedure.  Text embeddings are class anchors plus noise.
    All anchors sit around one shared unit direction at distance scale
    ``sigma_between``, which controls cluster separation; ``sigma_within``
    scales the per-sample noise.
    """

    d: int
    n: int
    num_classes: int
    per_class: int
    ood_count: int
    sigma_between: float = 0.5
    sigma_within: float = 0.1
    lesion_fraction: float = 0.5
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.d < 1 or self.n < 1 or self.num_classes < 2:
            raise ConfigError(
                f"need d >= 1, n >= 1, num_classes >= 2; got d={self.d}, "
                f"n={self.n}, num_classes={self.num_classes}"
            )
        if self.per_class < 0 or self.ood_count < 0:
            raise ConfigError("item counts must be non-negative")
        if self.sigma_between <= 0.0 or self.sigma_within <= 0.0:
            raise ConfigError("sigma_between and sigma_within must be positive")
        if not 0.0 <= self.lesion_fraction <= 1.0:
            raise ConfigError("lesion_fraction must lie in [0, 1]")
        if not self.class_names:
            self.class_names = [f"class-{c}" for c in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ConfigError(
                f"expected {self.num_classes} class names, got {len(self.class_names)}"
            )


def record_floats(d: int, n: int) -> int:
    """Float32 values per item record: (1 + n^2 + 4 n^2) * d."""
    return (1 + n * n + 4 * n * n) * d


def record_bytes(d: int, n: int) -> int:
    return record_floats(d, n) * 4


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str, kind: type, where: str):
    if key not in obj:
        raise FormatError(f"{where}: missing key {key!r}")
    val = obj[key]
    if kind is int and isinstance(val, bool):
        raise FormatError(f"{where}: key {key!r} must be {kind.__name__}")
    if not isinstance(val, kind):
        raise FormatError(f"{where}: key {key!r} must be {kind.__name__}")
    return val


def _parse_manifest(raw: dict) -> BundleManifest:
    for key in raw:
        if key not in _MANIFEST_KEYS:
            logger.warning("manifest: ignoring unknown key %r", key)
    version = _require(raw, "version", int, "manifest")
    if version != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    d = _require(raw, "d", int, "manifest")
    n = _require(raw, "n", int, "manifest")
    num_classes = _require(raw, "num_classes", int, "manifest")
    class_names = _require(raw, "class_names", list, "manifest")
    items_raw = _require(raw, "items", list, "manifest")
    if d < 1 or n < 1:
        raise DataError(f"manifest: need d >= 1 and n >= 1, got d={d}, n={n}")
    if num_classes < 2:
        raise DataError(f"manifest: need num_classes >= 2, got {num_classes}")
    if len(class_names) != num_classes:
        raise DataError(
            f"manifest: {num_classes} classes declared but "
            f"{len(class_names)} names given"
        )
    if len(set(class_names)) != len(class_names):
        raise DataError("manifest: class names must be unique")

    items: list[ItemMeta] = []
    seen_ids: set[str] = set()
    for i, row in enumerate(items_raw):
        if not isinstance(row, dict):
            raise FormatError(f"manifest: item {i} is not an object")
        for key in row:
            if key not in _ITEM_KEYS:
                logger.warning("manifest: item %d: ignoring unknown key %r", i, key)
        item_id = _require(row, "id", str, f"item {i}")
        label = _require(row, "label", int, f"item {i}")
        offset = _require(row, "offset", int, f"item {i}")
        if item_id in seen_ids:
            raise DataError(f"manifest: duplicate item id {item_id!r}")
        seen_ids.add(item_id)
        if label != -1 and not 0 <= label < num_classes:
            raise DataError(
                f"manifest: item {item_id!r} has label {label}, "
                f"expected -1 or 0..{num_classes - 1}"
            )
        items.append(ItemMeta(item_id=item_id, label=label, offset=offset))
    return BundleManifest(
        d=d, n=n, num_classes=num_classes,
        class_names=list(class_names), items=items, version=version,
    )


def load_bundle(path: str | Path) -> Bundle:
    """Load and validate a bundle directory.

    Returns float64 arrays regardless of on-disk precision.  Loading is
    read-only and safe to call from multiple threads.

    Raises:
        FormatError: malformed manifest or binary layout.
        TruncationError: a binary file is shorter than the manifest implies.
        DataError: invalid labels, duplicate ids, or non-finite values.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"no {MANIFEST_NAME} in {path}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"manifest is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError("manifest top level must be a JSON object")
    manifest = _parse_manifest(raw)

    rec_bytes = record_bytes(manifest.d, manifest.n)
    emb_path = path / EMBEDDINGS_NAME
    if not emb_path.is_file():
        raise FormatError(f"no {EMBEDDINGS_NAME} in {path}")
    emb_size = emb_path.stat().st_size
    expected = rec_bytes * len(manifest.items)
    if emb_size < expected:
        raise TruncationError(
            f"{EMBEDDINGS_NAME} holds {emb_size} bytes, expected {expected}"
        )
    if emb_size != expected:
        raise FormatError(
            f"{EMBEDDINGS_NAME} holds {emb_size} bytes, expected {expected}"
        )
    for meta in manifest.items:
        if meta.offset % 4 != 0:
            raise FormatError(
                f"item {meta.item_id!r}: offset {meta.offset} is not 4-byte aligned"
            )
        if meta.offset < 0 or meta.offset + rec_bytes > emb_size:
            raise FormatError(
                f"item {meta.item_id!r}: record at offset {meta.offset} "
                f"exceeds file bounds"
            )

    blob = np.fromfile(emb_path, dtype="<f4")
    n_sq = manifest.n * manifest.n
    d = manifest.d
    items: list[ImageEmbeddings] = []
    for meta in manifest.items:
        start = meta.offset // 4
        rec = blob[start:start + record_floats(d, manifest.n)].astype(np.float64)
        if not np.all(np.isfinite(rec)):
            raise DataError(f"item {meta.item_id!r}: non-finite embedding values")
        items.append(ImageEmbeddings(
            item_id=meta.item_id,
            label=meta.label,
            v_global=rec[:d].copy(),
            v_mid=rec[d:d + n_sq * d].reshape(n_sq, d).copy(),
            v_high=rec[d + n_sq * d:].reshape(4 * n_sq, d).copy(),
        ))

    text_path = path / TEXT_NAME
    if not text_path.is_file():
        raise FormatError(f"no {TEXT_NAME} in {path}")
    text_size = text_path.stat().st_size
    text_expected = manifest.num_classes * d * 4
    if text_size < text_expected:
        raise TruncationError(
            f"{TEXT_NAME} holds {text_size} bytes, expected {text_expected}"
        )
    if text_size != text_expected:
        raise FormatError(
            f"{TEXT_NAME} holds {text_size} bytes, expected {text_expected}"
        )
    rows = np.fromfile(text_path, dtype="<f4").astype(np.float64)
    t_base = rows.reshape(manifest.num_classes, d).T.copy()
    if not np.all(np.isfinite(t_base)):
        raise DataError("text bank contains non-finite values")
    return Bundle(manifest=manifest, items=items, text=TextBank(t_base=t_base))


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_bundle(bundle: Bundle, path: str | Path) -> None:
    """Write a bundle directory; offsets are normalized to contiguous layout.

    Items must match the manifest rows in order, id, and label.  Arrays are
    cast to float32 little-endian on disk.
    """
    manifest, items, text = bundle.manifest, bundle.items, bundle.text
    path = Path(path)
    if len(items) != len(manifest.items):
        raise DataError(
            f"manifest lists {len(manifest.items)} items but {len(items)} given"
        )
    d, n = manifest.d, manifest.n
    n_sq = n * n
    if text.t_base.shape != (d, manifest.num_classes):
        raise DataError(
            f"text bank shape {text.t_base.shape}, "
            f"expected {(d, manifest.num_classes)}"
        )
    rec_b = record_bytes(d, n)
    records: list[np.ndarray] = []
    for i, (meta, item) in enumerate(zip(manifest.items, items)):
        if meta.item_id != item.item_id or meta.label != item.label:
            raise DataError(
                f"item {i}: manifest row ({meta.item_id!r}, {meta.label}) does "
                f"not match embeddings ({item.item_id!r}, {item.label})"
            )
        if (item.v_global.shape != (d,) or item.v_mid.shape != (n_sq, d)
                or item.v_high.shape != (4 * n_sq, d)):
            raise DataError(f"item {item.item_id!r}: embedding shapes do not match manifest")
        meta.offset = i * rec_b
        flat = np.concatenate(
            [item.v_global, item.v_mid.reshape(-1), item.v_high.reshape(-1)]
        )
        records.append(flat.astype("<f4"))

    path.mkdir(parents=True, exist_ok=True)
    blob = np.concatenate(records) if records else np.zeros(0, dtype="<f4")
    _atomic_write(path / EMBEDDINGS_NAME, blob.tobytes())
    _atomic_write(path / TEXT_NAME, text.t_base.T.astype("<f4").tobytes())
    doc = {
        "version": manifest.version,
        "d": d,
        "n": n,
        "num_classes": manifest.num_classes,
        "class_names": manifest.class_names,
        "items": [
            {"id": m.item_id, "label": m.label, "offset": m.offset}
            for m in manifest.items
        ],
    }
    _atomic_write(
        path / MANIFEST_NAME,
        json.dumps(doc, indent=2).encode("utf-8"),
    )


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def _standard_normal(rng: np.random.Generator, size: int) -> np.ndarray:
    """Standard normals via Box-Muller over uniform doubles.

    Spelled out rather than delegated to the generator's own normal() so the
    Gaussian stream is pinned to a documented transform of Philox output.
    """
    pairs = (size + 1) // 2
    u1 = rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(1.0 - u1))
    angle = 2.0 * math.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
    return z[:size]


def _quantize(vec: np.ndarray) -> np.ndarray:
    """Round through float32 so in-memory values equal their on-disk form."""
    return vec.astype(np.float32).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Bundle:
    """Generate a deterministic synthetic bundle.

    Sampling order (fixed; identical seeds give bitwise-identical bundles):
    shared base direction, class anchors, tissue anchor, the text bank, then
    items in manifest order (ID items class-major, OOD items last).  Per
    patch: one uniform for the lesion/tissue choice, then the noise vector.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    d, n, num_classes = spec.d, spec.n, spec.num_classes
    n_sq = n * n

    base = _standard_normal(rng, d)
    norm = float(np.linalg.norm(base))
    if norm > 0.0:
        base = base / norm
    anchors = np.stack([
        base + spec.sigma_between * _standard_normal(rng, d)
        for _ in range(num_classes)
    ])
    tissue = base + spec.sigma_between * _standard_normal(rng, d)
    t_base = np.stack([
        _quantize(anchors[c] + spec.sigma_within * _standard_normal(rng, d))
        for c in range(num_classes)
    ]).T

    def sample_patches(anchor: np.ndarray, count: int) -> np.ndarray:
        rows = np.empty((count, d))
        for i in range(count):
            lesion = rng.random() < spec.lesion_fraction
            center = anchor if lesion else tissue
            rows[i] = _quantize(center + spec.sigma_within * _standard_normal(rng, d))
        return rows

    items: list[ImageEmbeddings] = []
    metas: list[ItemMeta] = []
    rec_b = record_bytes(d, n)

    def emit(anchor: np.ndarray, label: int) -> None:
        idx = len(items)
        item_id = f"syn-{idx:05d}"
        v_global = _quantize(anchor + spec.sigma_within * _standard_normal(rng, d))
        v_mid = sample_patches(anchor, n_sq)
        v_high = sample_patches(anchor, 4 * n_sq)
        items.append(ImageEmbeddings(
            item_id=item_id, label=label,
            v_global=v_global, v_mid=v_mid, v_high=v_high,
        ))
        metas.append(ItemMeta(item_id=item_id, label=label, offset=idx * rec_b))

    for c in range(num_classes):
        for _ in range(spec.per_class):
            emit(anchors[c], c)
    for _ in range(spec.ood_count):
        c1 = int(rng.integers(0, num_classes))
        c2 = int(rng.integers(0, num_classes - 1))
        if c2 >= c1:
            c2 += 1
        weight = 0.35 + 0.3 * rng.random()
        emit(weight * anchors[c1] + (1.0 - weight) * anchors[c2], -1)

    manifest = BundleManifest(
        d=d, n=n, num_classes=num_classes,
        class_names=list(spec.class_names), items=metas,
    )
    return Bundle(manifest=manifest, items=items, text=TextBank(t_base=t_base))
