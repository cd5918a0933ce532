"""Exception types shared across modules."""


class ContainerError(ValueError):
    """A binary container could not be decoded."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ConfigError(ValueError):
    """A configuration failed validation; ``keys`` names the offending entries."""

    def __init__(self, message: str, keys=()):
        super().__init__(message)
        self.keys = list(keys)
