"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration and data problems
exit 2, numerical failures exit 3, verification failures exit 4.
"""

from __future__ import annotations


class MsoodError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MsoodError, ValueError):
    """A configuration value is missing, malformed, or out of range."""


class DataError(MsoodError, ValueError):
    """Bundle content is invalid (bad labels, non-finite values, counts)."""


class FormatError(DataError):
    """A bundle file is structurally malformed (manifest or binary layout)."""


class TruncationError(FormatError):
    """A binary file is shorter than its manifest claims."""


class ContractViolation(MsoodError, ValueError):
    """A caller broke a documented precondition of an internal API."""


class NumericalError(MsoodError, RuntimeError):
    """A computation produced a non-finite value where one is not allowed."""
