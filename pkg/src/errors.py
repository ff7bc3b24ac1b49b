"""
Error Types Module

Exceptions raised by the segmentation library. The command-line entry point
maps each family onto a process exit code.
"""


class SegmentationError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigurationError(SegmentationError, ValueError):
    """Invalid configuration key, value or model architecture."""

    exit_code = 1


class DatasetError(SegmentationError, ValueError):
    """Malformed dataset layout, image or label mask."""

    exit_code = 2


class ExportError(SegmentationError, OSError):
    """A prediction could not be written to disk."""

    exit_code = 2


class NumericalError(SegmentationError, ArithmeticError):
    """
    Non-finite loss or gradient.

    Attributes:
        term (str): Name of the offending loss term or parameter
    """

    exit_code = 3

    def __init__(self, message: str, term: str = ""):
        super().__init__(message)
        self.term = term
