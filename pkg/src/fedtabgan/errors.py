"""Exception types shared across the toolkit."""


class FedTabGanError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FedTabGanError):
    """Invalid configuration: bad dimensions, counts, or option values."""


class ShapeError(FedTabGanError):
    """A matrix does not have the shape an operation requires."""


class UsageError(FedTabGanError):
    """An API was called out of contract (stale cache, bad row index, ...)."""


class NumericError(FedTabGanError):
    """A non-finite value appeared where finite math was required."""


class ParseError(FedTabGanError):
    """A data file could not be parsed."""


class ProtocolError(FedTabGanError):
    """A wire frame violated the message protocol."""


class IntegrityError(FedTabGanError):
    """A payload failed its checksum or internal consistency checks."""


class ValidationError(FedTabGanError):
    """User-supplied records reference unknown ids or categories."""
