"""Exception hierarchy.

Everything raised on purpose by the library derives from
:class:`MultiRegionError`; the CLI maps the families onto exit codes.
"""


class MultiRegionError(Exception):
    """Base class for library errors."""


class InvalidBoxError(MultiRegionError, ValueError):
    """A box with non-positive width or height."""


class InvalidArgumentError(MultiRegionError, ValueError):
    pass


class EmptyRegionError(MultiRegionError):
    """A region projects to zero feature-map cells."""

    def __init__(self, message, region=None):
        super().__init__(message)
        self.region = region


class FeatureFormatError(MultiRegionError):
    """Malformed feature-map file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TruncatedPayloadError(FeatureFormatError):
    pass


class DegenerateDataError(MultiRegionError):
    """Training data that cannot define the requested model."""


class ShapeMismatchError(MultiRegionError, ValueError):
    pass


class UndefinedMetricError(MultiRegionError):
    """A metric whose inputs leave it mathematically undefined."""


class ConfigError(MultiRegionError):
    pass


class DataError(MultiRegionError):
    pass


class ModelFormatError(MultiRegionError):
    pass
