"""Exception types shared across the toolkit.

Each class carries the process exit code the CLI maps it to, so failures
surface as one machine-parseable line with a stable code.
"""


class DidError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class MissingFileError(DidError):
    """A referenced file does not exist."""

    exit_code = 3


class ConfigError(DidError):
    """Invalid or inconsistent configuration."""

    exit_code = 4


class InputError(DidError):
    """Malformed input data: manifests, audio, feature or score files."""

    exit_code = 5


class AlignmentError(InputError):
    """Two score files do not cover the same utterance set."""

    exit_code = 5


class DimensionError(DidError):
    """Tensor/array shape mismatch."""

    exit_code = 6


class ContractError(DidError):
    """An operation was called outside its contract (missing grads, double
    backward, missing labels, unknown layer type)."""

    exit_code = 7


class NumericError(DidError):
    """Non-finite values where finite ones are required."""

    exit_code = 8
