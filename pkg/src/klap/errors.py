"""Exception types raised across the package."""


class KlapError(Exception):
    """Base class for all package errors."""


class DimensionError(KlapError, ValueError):
    pass


class ShapeError(KlapError, ValueError):
    pass


class BinningError(KlapError, ValueError):
    pass


class LengthError(KlapError, ValueError):
    pass


class SingularMatrixError(KlapError, ValueError):
    pass


class TraceMismatchError(KlapError):
    pass


class FormatError(KlapError):
    """A binary or text file does not follow its expected layout."""


class VersionError(FormatError):
    pass


class EmptyDatasetError(KlapError):
    pass


class SpecMismatchError(KlapError):
    pass


class LayoutMismatchError(KlapError):
    pass


class IsolationError(KlapError):
    pass


class ConfigError(KlapError):
    """Invalid run configuration; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
