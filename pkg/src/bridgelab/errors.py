"""Exception types shared across the package."""


class BridgeLabError(Exception):
    """Base class for all package errors."""


class DomainError(BridgeLabError, ValueError):
    """An argument violates an operation's documented preconditions."""


class NumericalError(BridgeLabError, RuntimeError):
    """An internal numerical invariant broke down (NaN, lost positivity, ...)."""
