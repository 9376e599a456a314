"""Exception types shared across the toolkit.

Everything raised on a user-facing path derives from DitquantError so the
CLI can catch one base class and exit with a single-line error.
"""


class DitquantError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(DitquantError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(DitquantError, ValueError):
    """A configuration value violates its documented constraints."""


class ContractError(DitquantError, RuntimeError):
    """An internal usage contract was violated (e.g. out-of-grid codes,
    attaching hooks during range collection)."""


class SignalError(DitquantError, ValueError):
    """A metric is undefined for the given signal (e.g. all-zero reference)."""
