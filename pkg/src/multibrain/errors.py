"""Exception classes shared across the package.

The CLI maps these onto structured exit codes, so new error conditions
should reuse (or subclass) one of the families below.
"""

from __future__ import annotations


class MultibrainError(Exception):
    """Base class for all package errors."""


class ConfigError(MultibrainError):
    """Invalid or inconsistent configuration (bad values, bad combinations)."""


class DataError(MultibrainError):
    """Dataset layout, contents or metadata violate the format contract."""


class GeometryError(MultibrainError):
    """Model/adapter/head shapes are incompatible."""


class TrainingError(MultibrainError):
    """Training could not proceed or diverged."""
