"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class ConfigurationError(ValueError):
    """A layer, model or run configuration is internally inconsistent."""


class FormatError(ValueError):
    """A binary or text file does not follow its on-disk format.

    ``offset`` is the byte (or line) position where decoding stopped, if known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
