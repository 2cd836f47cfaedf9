"""Exception types raised across the package."""


class FoeError(Exception):
    """Base class for package errors."""


class DimensionError(FoeError, ValueError):
    """Array shapes are inconsistent with each other or with an operator."""


class ParameterError(FoeError, ValueError):
    """A scalar or structural parameter is outside its admissible range."""


class UnsupportedConfiguration(FoeError, ValueError):
    """The requested combination of options is not implemented."""


class NotConvergedError(FoeError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class ImageIOError(FoeError, OSError):
    """An image file could not be read or written."""
