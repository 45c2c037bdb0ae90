"""Image datasets to multi-scale embedding bundles for the msood detector."""

from .encoders import ClipEncoder, Encoder, ToyEncoder, get_encoder
from .errors import (
    EncoderError,
    ExtractorError,
    ManifestError,
    SpecError,
    WriteError,
)
from .extract import ExtractReport, ExtractSpec, extract, image_views, patch_crops
from .manifest import DatasetRow, read_dataset_manifest, resolve_label
from .regions import Region, grid_regions, parent_index
from .writer import BundleWriter

__version__ = "0.1.0"

__all__ = [
    "BundleWriter",
    "ClipEncoder",
    "DatasetRow",
    "Encoder",
    "EncoderError",
    "ExtractReport",
    "ExtractSpec",
    "ExtractorError",
    "ManifestError",
    "Region",
    "SpecError",
    "ToyEncoder",
    "WriteError",
    "extract",
    "get_encoder",
    "grid_regions",
    "image_views",
    "parent_index",
    "patch_crops",
    "read_dataset_manifest",
    "resolve_label",
    "__version__",
]
