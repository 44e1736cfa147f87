"""Exception classes shared across the package.

The CLI maps these onto exit codes, so raising the right class matters:
config/argument problems exit 2, file problems exit 3, numerical blowups
exit 4, and internal contract violations exit 5.
"""


class ShapeError(ValueError):
    """Array dimensions disagree with what an operation requires."""


class ArgumentError(ValueError):
    """A scalar argument or configuration value is out of range."""


class ConfigError(ArgumentError):
    """A run configuration document is malformed or has unknown keys."""


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values (diverged training etc.)."""


class ContractError(RuntimeError):
    """An internal invariant was violated; indicates a bug, not bad input."""
