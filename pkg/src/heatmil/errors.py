"""Exception types shared across the package."""


class HeatmilError(Exception):
    """Base class for all package errors."""


class DimensionError(HeatmilError, ValueError):
    pass


class ConfigError(HeatmilError, ValueError):
    pass


class LayoutError(HeatmilError, ValueError):
    """Patch coordinates are duplicated or otherwise inconsistent."""


class FormatError(HeatmilError, ValueError):
    """A file does not follow its binary/text layout.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericalError(HeatmilError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class OracleError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass


class UndefinedMetricError(HeatmilError, ValueError):
    pass
