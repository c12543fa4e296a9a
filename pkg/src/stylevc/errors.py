"""Shared exception types, mapped to CLI exit codes in stylevc.cli."""


class StyleVCError(Exception):
    """Base class for all package errors."""


class ConfigError(StyleVCError):
    """Invalid or inconsistent configuration."""


class InputError(StyleVCError, ValueError):
    """An argument violates an operation's preconditions."""


class DataError(StyleVCError):
    """A corpus or manifest violates its invariants."""


class ParseError(DataError):
    """A manifest or config file could not be parsed."""


class NumericError(StyleVCError):
    """A computation produced non-finite values."""


class CheckpointError(StyleVCError):
    """Base class for checkpoint container problems."""


class IntegrityError(CheckpointError):
    """Checkpoint payload is truncated or fails its checksum."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported by this build."""
