"""Exception types shared across the package.

The CLI maps ``GenSyncError`` subclasses to exit code 1 and ``OSError`` to
exit code 2.
"""


class GenSyncError(Exception):
    """Base class for contract and validation failures."""


class DimensionError(GenSyncError, ValueError):
    pass


class ContractError(GenSyncError, ValueError):
    pass


class DegenerateRotationError(GenSyncError, ValueError):
    pass


class UnknownIdentityError(GenSyncError, KeyError):
    def __init__(self, label, registered):
        self.label = label
        self.registered = sorted(registered)
        super().__init__(f"unknown identity {label!r}; registered: {self.registered}")

    def __str__(self):
        return self.args[0]


class FormatError(GenSyncError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VersionError(GenSyncError, ValueError):
    pass


class ConfigError(GenSyncError, ValueError):
    pass
