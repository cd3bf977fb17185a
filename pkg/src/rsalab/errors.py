"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 3, DataError -> 4,
everything else is an ordinary failure.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation's contract."""


class ConfigError(ValueError):
    """Bad, missing, or unknown configuration key/value."""


class DataError(ValueError):
    """Malformed dataset file or record."""


class DegenerateBatchError(ValueError):
    """A loss was asked to run on a batch with nothing to supervise."""


class NonFiniteLossError(FloatingPointError):
    """A loss evaluation produced NaN/inf (distinct gradient-check failure)."""
