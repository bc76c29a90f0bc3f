class ConfigError(ValueError):
    """Invalid configuration or incompatible parameter shapes."""


class EnumerationCapExceeded(RuntimeError):
    """The exact oracle would need more sequences than the configured cap."""


class PreconditionError(ValueError):
    """An operation was called outside its stated preconditions."""
