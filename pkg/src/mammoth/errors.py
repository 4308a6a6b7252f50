"""Shared exception types.

Exit-code mapping in the CLI: usage problems exit 1, anything raised from
these classes (or other runtime failures) exits 2.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class EmptyBagError(ValueError):
    """A bag with zero instances reached an operation that needs N >= 1."""


class BagParseError(ValueError):
    """A bag file is malformed; message names the failing byte offset."""


class NonFiniteError(RuntimeError):
    """A loss or gradient became NaN/inf; message names the tensor."""
