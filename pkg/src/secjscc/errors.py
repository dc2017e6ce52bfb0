"""Exception types shared across the package."""


class SecJsccError(Exception):
    """Base class for all package errors."""


class ValidationError(SecJsccError, ValueError):
    """An input object violates its invariants (bad PMF, bad matrix shape, ...)."""


class ArgumentError(SecJsccError, ValueError):
    """An operation was called with arguments outside its domain."""


class ResourceError(SecJsccError, RuntimeError):
    """A configured size cap would be exceeded.

    ``required`` carries the size that would have been needed, ``cap`` the
    configured limit, so callers can print a useful diagnostic.
    """

    def __init__(self, message, required=None, cap=None):
        super().__init__(message)
        self.required = required
        self.cap = cap
