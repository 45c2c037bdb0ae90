"""Exception hierarchy for the extraction pipeline.

Everything raised on purpose derives from ``ExtractorError`` so the
command-line entry point can map any expected failure to exit code 2.
Unreadable images are not errors: they are skipped with a logged warning
and excluded from the output manifest.
"""

__all__ = [
    "EncoderError",
    "ExtractorError",
    "ManifestError",
    "SpecError",
    "WriteError",
]


class ExtractorError(Exception):
    """Base class for expected extraction failures."""


class SpecError(ExtractorError):
    """An extraction setting violates its invariants."""


class ManifestError(ExtractorError):
    """The dataset manifest is unreadable or inconsistent."""


class EncoderError(ExtractorError):
    """Unknown encoder, missing optional dependency, or width mismatch."""


class WriteError(ExtractorError):
    """The output bundle would violate its on-disk contract."""
