"""Exception hierarchy shared by every module."""


class SwanError(Exception):
    """Base class for all errors raised by swankv."""


class InvalidInputError(SwanError, ValueError):
    """An argument has the wrong shape, is non-finite, or is otherwise malformed."""


class ConfigurationError(SwanError, ValueError):
    """Model, cache, or projection parameters are inconsistent."""


class CacheStateError(SwanError, RuntimeError):
    """An operation was attempted on a cache that cannot support it (e.g. empty)."""
