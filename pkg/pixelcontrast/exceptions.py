"""Errors raised by the pixel contrast package."""

from __future__ import annotations


class PixelContrastError(Exception):
    """Base error for the package."""


class ValidationError(PixelContrastError):
    """Error to indicate user supplied input failed validation."""


class InvalidConfig(ValidationError):
    """Error to indicate a configuration key or value is invalid."""


class InvalidSpec(ValidationError):
    """Error to indicate a synthetic dataset spec is invalid."""


class EmptyDataset(ValidationError):
    """Error to indicate a dataset has no training images."""


class ZeroVector(PixelContrastError):
    """Error to indicate a vector is too short to normalize."""


class LengthMismatch(PixelContrastError):
    """Error to indicate two vectors differ in length."""


class ShapeMismatch(PixelContrastError):
    """Error to indicate two arrays have incompatible shapes."""


class IgnoredPixel(PixelContrastError):
    """Error to indicate a loss was requested for an IGNORE pixel."""


class EmptyPositives(PixelContrastError):
    """Error to indicate a contrast anchor has no positives."""


class EmptyCeTerms(PixelContrastError):
    """Error to indicate the joint loss received no cross-entropy terms."""


class ScheduleExhausted(PixelContrastError):
    """Error to indicate the optimizer stepped past its schedule."""


class CorruptFile(PixelContrastError):
    """Error to indicate a stored file has a bad header or size."""


class MissingManifest(PixelContrastError):
    """Error to indicate a dataset manifest or a file it names is absent."""


class NonFiniteLoss(PixelContrastError):
    """Error to indicate training produced a NaN or infinite loss."""


class GradCheckError(PixelContrastError):
    """Error to indicate a gradient check case could not be built."""


class UsageError(ValidationError):
    """Error to indicate the command line could not be parsed."""
