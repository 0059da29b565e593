"""Exception hierarchy shared by every module."""


class BatchRLError(Exception):
    """Base class for package errors."""


class ConfigurationError(BatchRLError, ValueError):
    """Invalid settings, arities or shapes."""


class GraphStateError(BatchRLError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class IntegrationError(BatchRLError, ArithmeticError):
    """An integrator produced a non-finite value.

    The offending state is kept on ``state`` so callers can report it.
    """

    def __init__(self, message, state=None, context=None):
        super().__init__(message)
        self.state = state
        self.context = dict(context or {})

    def with_context(self, **context):
        self.context.update(context)
        return self


class DomainError(BatchRLError, ValueError):
    """An argument lies outside a function's mathematical domain."""
