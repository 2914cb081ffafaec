"""Shared exception types, one per error contract used across the toolkit."""


class ShapeError(ValueError):
    """Operand shapes do not compose for the requested operation."""


class ConfigError(ValueError):
    """A declarative description (layer sizes, gate dims, fractions, ...) is invalid."""


class ContractError(ValueError):
    """An operation was invoked outside its stated preconditions."""


class ParseError(ValueError):
    """Malformed bytes or text in an external file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
