"""Exception hierarchy. The CLI maps these onto exit codes."""


class MMHomogError(Exception):
    pass


class GeometryError(MMHomogError, ValueError):
    pass


class SingularHomographyError(GeometryError):
    pass


class PointAtInfinityError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class DataError(MMHomogError):
    """Unreadable, unmatched or malformed corpus content."""


class ConfigError(MMHomogError, ValueError):
    pass


class NumericalAbort(MMHomogError):
    """A training step produced a non-finite loss."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index
