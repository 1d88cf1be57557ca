"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class VoxmemError(Exception):
    exit_code = 3


class ConfigError(VoxmemError):
    exit_code = 1


class DimensionError(VoxmemError, ValueError):
    exit_code = 3


class ContractError(VoxmemError):
    exit_code = 3


class DegenerateInputError(VoxmemError, ValueError):
    exit_code = 3


class EmptyBankError(VoxmemError):
    exit_code = 3


class EmptySurfaceError(VoxmemError):
    exit_code = 3


class GenerationError(VoxmemError):
    exit_code = 3


class FormatError(VoxmemError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
