"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code (see :mod:`unmaskrl.cli`).
"""


class UnmaskError(Exception):
    exit_code = 1


class ConfigError(UnmaskError, ValueError):
    """Invalid configuration, shape mismatch, or bad environment spec."""

    exit_code = 2


class ContractError(UnmaskError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class NumericalError(UnmaskError, ArithmeticError):
    """Non-finite or underflowing value where a finite positive one is required."""

    exit_code = 3


class InconsistencyError(UnmaskError):
    """The environment was asked about a state that has zero probability."""

    exit_code = 3
