"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``InputError`` and ``NumericError``
are data errors (exit 1), argparse handles usage errors (exit 2).
"""


class DuplexKitError(Exception):
    """Base class for all errors raised by duplexkit."""


class InputError(DuplexKitError, ValueError):
    """Malformed or out-of-range input data."""


class NumericError(DuplexKitError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class StateError(DuplexKitError, RuntimeError):
    """Operation not valid for the current engine state or mode."""
