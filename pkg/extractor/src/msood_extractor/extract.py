"""Dataset-to-bundle extraction.

For every image the pipeline builds 1 + n^2 + 4 n^2 views: the original
image, the cells of the n x n grid over the n-times-upsampled image, and
the cells of the 2n x 2n grid over the 2n-times-upsampled image, in
row-major cell order. Upsampling uses bicubic interpolation and every
view is then resized, again bicubic, to the encoder's native square
input. The frozen encoder maps each view to a raw feature vector and the
class prompt strings to one text row per class; the writer lays both out
in the consumer's bundle format.

Unreadable images are skipped with a logged warning and left out of the
output manifest. Everything else that can go wrong (bad settings, bad
labels, encoder problems) raises before the bundle is published.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import Encoder, get_encoder
from .errors import ManifestError, SpecError
from .manifest import read_dataset_manifest, resolve_label
from .regions import grid_regions
from .writer import BundleWriter

logger = logging.getLogger(__name__)

__all__ = ["ExtractReport", "ExtractSpec", "extract", "image_views", "patch_crops"]

PLACEHOLDER = "[class]"
_RESAMPLE = Image.Resampling.BICUBIC


@dataclass
class ExtractSpec:
    """Everything one extraction run needs.

    ``expected_d`` pins the embedding width; an encoder of any other
    width is a hard error. ``batch_size`` only bounds how many views go
    through the encoder per call, never the output.
    """

    manifest: Path
    out: Path
    class_names: list[str]
    n: int = 2
    encoder: str = "clip-vit-b16"
    template: str = f"a photo of a {PLACEHOLDER}"
    batch_size: int = 16
    expected_d: int | None = None

    def __post_init__(self) -> None:
        self.manifest = Path(self.manifest)
        self.out = Path(self.out)
        if self.n < 1:
            raise SpecError(f"partition factor must be >= 1, got {self.n}")
        if self.batch_size < 1:
            raise SpecError(f"batch size must be >= 1, got {self.batch_size}")
        if self.expected_d is not None and self.expected_d < 1:
            raise SpecError(f"expected width must be >= 1, got {self.expected_d}")
        count = self.template.count(PLACEHOLDER)
        if count != 1:
            raise SpecError(
                f"prompt template must contain exactly one {PLACEHOLDER!r} "
                f"placeholder, found {count}: {self.template!r}"
            )
        if len(self.class_names) < 2:
            raise SpecError(
                f"need at least two class names, got {len(self.class_names)}"
            )
        if len(set(self.class_names)) != len(self.class_names):
            raise SpecError("class names must be unique")
        if not all(name for name in self.class_names):
            raise SpecError("class names must be nonempty")

    def prompts(self) -> list[str]:
        return [self.template.replace(PLACEHOLDER, name)
                for name in self.class_names]


@dataclass
class ExtractReport:
    """Outcome summary of one extraction run."""

    out: Path
    d: int
    n: int
    written: int
    skipped: list[str] = field(default_factory=list)


def patch_crops(image: Image.Image, factor: int) -> list[Image.Image]:
    """Grid cells of the image upsampled ``factor`` times, row-major.

    Each crop has the original image's size; together the crops tile the
    upsampled image exactly.
    """
    width, height = image.size
    upsampled = image.resize((width * factor, height * factor), _RESAMPLE)
    return [upsampled.crop(region.box())
            for region in grid_regions(width, height, factor)]


def image_views(image: Image.Image, n: int, input_size: int) -> np.ndarray:
    """All encoder inputs for one image as a (1 + 5 n^2, S, S, 3) stack.

    Order matches the bundle record: the whole image first, then the
    n x n grid cells, then the 2n x 2n grid cells, each resized to the
    encoder's native square input with values scaled to [0, 1].
    """
    image = image.convert("RGB")
    views = [image, *patch_crops(image, n), *patch_crops(image, 2 * n)]
    stack = [
        np.asarray(view.resize((input_size, input_size), _RESAMPLE),
                   dtype=np.float32) / 255.0
        for view in views
    ]
    return np.stack(stack)


def _encode_views(encoder: Encoder, views: np.ndarray, batch_size: int) -> np.ndarray:
    parts = [encoder.encode_images(views[start:start + batch_size])
             for start in range(0, views.shape[0], batch_size)]
    return np.concatenate(parts, axis=0)


def _item_id(path: Path, manifest_dir: Path) -> str:
    try:
        return path.relative_to(manifest_dir).as_posix()
    except ValueError:
        return path.as_posix()


def extract(spec: ExtractSpec) -> ExtractReport:
    """Run one extraction and publish the bundle at ``spec.out``."""
    rows = read_dataset_manifest(spec.manifest)
    encoder = get_encoder(spec.encoder)
    if spec.expected_d is not None and encoder.d != spec.expected_d:
        raise SpecError(
            f"encoder {encoder.name} has width {encoder.d}, "
            f"but width {spec.expected_d} was requested"
        )

    manifest_dir = spec.manifest.parent
    labels = [resolve_label(row.label, spec.class_names) for row in rows]
    ids = [_item_id(row.path, manifest_dir) for row in rows]
    duplicates = {item_id for item_id in ids if ids.count(item_id) > 1}
    if duplicates:
        raise ManifestError(
            f"manifest lists the same image more than once: {sorted(duplicates)}"
        )

    n_sq = spec.n * spec.n
    skipped: list[str] = []
    with BundleWriter(spec.out, encoder.d, spec.n, spec.class_names) as writer:
        writer.write_text(encoder.encode_texts(spec.prompts()))
        for row, label, item_id in zip(rows, labels, ids):
            try:
                with Image.open(row.path) as handle:
                    views = image_views(handle, spec.n, encoder.input_size)
            except (OSError, ValueError, Image.DecompressionBombError) as exc:
                logger.warning("skipping unreadable image %s: %s", row.path, exc)
                skipped.append(item_id)
                continue
            features = _encode_views(encoder, views, spec.batch_size)
            writer.add_item(
                item_id, label,
                v_global=features[0],
                v_mid=features[1:1 + n_sq],
                v_high=features[1 + n_sq:],
            )
        written = len(ids) - len(skipped)
        writer.finalize()
    logger.info("wrote %d item(s) to %s, skipped %d", written, spec.out,
                len(skipped))
    return ExtractReport(out=spec.out, d=encoder.d, n=spec.n,
                         written=written, skipped=skipped)
