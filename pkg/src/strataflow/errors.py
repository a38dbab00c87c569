"""Exception types shared across the library.

Every failure mode maps to one of these so callers (and the CLI) can
distinguish usage errors from runtime errors without string matching.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes (or dtypes) for an operation."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class InputError(ValueError):
    """A runtime input (label, sample set, ...) is outside the domain."""


class CheckpointError(RuntimeError):
    """A checkpoint or data file is corrupt, truncated, or mismatched."""
