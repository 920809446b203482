"""Exception hierarchy shared by every lexgen module.

The CLI maps these onto exit codes: configuration/usage problems exit with 1,
bad input data with 2.
"""


class LexGenError(Exception):
    """Base class for all package errors."""


class ConfigError(LexGenError, ValueError):
    """Invalid configuration value or incompatible option combination."""


class UsageError(LexGenError, ValueError):
    """An API was called in a way its contract does not allow."""


class ShapeError(LexGenError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DataError(LexGenError, ValueError):
    """Malformed or out-of-range input data."""


class ParseError(DataError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc += f"{path}:"
        if line is not None:
            loc += f"{line}:"
        super().__init__(f"{loc} {message}" if loc else message)
        self.path = path
        self.line = line


class VocabError(DataError):
    """A token or language tag is not registered in the vocabulary."""


class CheckpointError(DataError):
    """A checkpoint is corrupt, truncated, or incompatible with the requested model."""


class NumericalError(LexGenError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""
