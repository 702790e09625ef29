"""Shared exception types, mapped to CLI exit codes (1 contract, 2 I/O)."""


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


class ConfigError(Exception):
    """Malformed or incomplete experiment configuration."""


class IdxFormatError(Exception):
    """Malformed IDX container; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(Exception):
    """Checkpoint file rejected: bad magic, version, or shape table."""
