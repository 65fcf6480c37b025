"""Exception hierarchy shared by every layer of the lab.

Services raise these with a human readable ``detail``; the command line
layer translates them into stable process exit codes.
"""

from typing import Optional


class LatentMIMError(Exception):
    """Base class for all errors raised by the lab.

    Args:
        detail: Human readable description of the failure.
        exit_code: Process exit code the CLI returns for this error.
    """

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigurationError(LatentMIMError, ValueError):
    """Invalid hyperparameter, preset, config key or geometry."""

    exit_code = 2

    def __init__(self, detail: str, key: Optional[str] = None):
        super().__init__(detail)
        self.key = key


class DimensionError(LatentMIMError, ValueError):
    """Operand shapes do not agree."""

    exit_code = 2


class DegenerateVectorError(LatentMIMError, ValueError):
    """A zero-norm vector reached a cosine similarity."""

    exit_code = 2


class ContractError(LatentMIMError):
    """An operation was called outside its contract."""

    exit_code = 2


class NonFiniteError(LatentMIMError, FloatingPointError):
    """An operation produced NaN or Inf.

    Args:
        op: Name of the operation whose output was not finite.
    """

    exit_code = 3

    def __init__(self, op: str, detail: Optional[str] = None):
        super().__init__(detail or f"non-finite values produced by '{op}'")
        self.op = op


class CheckpointError(LatentMIMError):
    """Checkpoint container is corrupt or does not match the model."""

    exit_code = 4


class DataIOError(LatentMIMError, OSError):
    """Dataset or run directory could not be read or written."""

    exit_code = 5
