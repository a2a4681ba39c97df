"""Exception types shared across the package."""


class DwellgateError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(DwellgateError):
    """A record could not be decoded at all (malformed JSON, not an object)."""


class SchemaError(DwellgateError):
    """A decoded record violates the event schema (missing or ill-typed fields)."""


class RangeError(DwellgateError):
    """A value is structurally valid but outside its legal range."""


class ConfigError(DwellgateError):
    """A configuration value, policy, or parameter combination is invalid."""
