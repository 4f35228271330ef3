"""Exception types raised across the package."""


class FedLabError(Exception):
    """Base class for all errors raised by fedlab."""


class DimensionError(FedLabError, ValueError):
    pass


class ConfigurationError(FedLabError, ValueError):
    pass


class FormatError(FedLabError, ValueError):
    """Malformed dataset or checkpoint file.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(FedLabError, ArithmeticError):
    pass


class AggregationError(FedLabError, ValueError):
    pass
