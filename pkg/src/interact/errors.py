"""Exception types shared across the package."""


class InteractError(Exception):
    pass


class DimensionError(InteractError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(InteractError, RuntimeError):
    """An API was called in a state where it is not valid."""


class ConfigError(InteractError, ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(InteractError, ValueError):
    """A persisted file is malformed, truncated, or of the wrong kind."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DigestMismatch(FormatError):
    def __init__(self, expected, found):
        super().__init__(
            f"config digest mismatch: checkpoint has {found:016x}, "
            f"current config has {expected:016x}"
        )
        self.expected = expected
        self.found = found
