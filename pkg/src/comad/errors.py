"""Exception hierarchy shared by every module.

Each class maps to one CLI exit code (see :mod:`comad.cli`).
"""


class ComadError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(ComadError, ValueError):
    exit_code = 2


class DimensionError(ComadError, ValueError):
    """Shapes that cannot be combined."""

    exit_code = 2


class ContractError(ComadError, ValueError):
    """An input violated a documented precondition."""

    exit_code = 2


class NumericError(ComadError, ArithmeticError):
    """NaN or Inf appeared in a forward or backward computation."""

    exit_code = 3


class CheckpointError(ComadError, OSError):
    """A checkpoint or dataset file is malformed or disagrees with the config."""

    exit_code = 4
