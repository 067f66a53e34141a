"""Exception types raised across the toolkit."""


class FlatcompError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FlatcompError, ValueError):
    pass


class ConsumedTapeError(FlatcompError, RuntimeError):
    pass


class SpecError(FlatcompError, ValueError):
    pass


class CalibrationError(FlatcompError, ValueError):
    pass


class StructureError(FlatcompError, ValueError):
    pass


class ConfigurationError(FlatcompError, ValueError):
    pass


class StatsError(FlatcompError, ValueError):
    pass


class GroupingError(FlatcompError, ValueError):
    pass


class FormatError(FlatcompError, ValueError):
    pass


class ConsistencyError(FlatcompError, ValueError):
    pass


class VersionError(FormatError):
    pass


class ReportError(FlatcompError, ValueError):
    pass
