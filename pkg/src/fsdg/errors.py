"""Exception types shared across the package.

Each class marks one failure family so tests and callers can tell apart
shape bugs, domain violations, broken file inputs, and contract misuse
without parsing message strings.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class DetachedTensorError(LookupError):
    """A gradient was requested for a tensor that is not on the graph."""


class NumericError(ArithmeticError):
    """An operation produced non-finite values."""


class CapacityError(ValueError):
    """A sampling request asks for more items than are available."""


class ParseError(ValueError):
    """Text input (CSV, config) could not be parsed."""


class ConfigError(ValueError):
    """A configuration value is unknown or inconsistent."""


class FormatError(ValueError):
    """A binary file does not match the expected layout."""


class VersionError(FormatError):
    """A binary file declares an unsupported format version."""


class LengthError(FormatError):
    """A binary file ends before the declared payload is complete."""
