"""Error hierarchy shared across the package.

The CLI maps UserError (and subclasses) to exit code 1 and everything else
to exit code 2, so raising the right class is part of the contract.
"""


class OrchestrateError(Exception):
    """Base class; unexpected internals surface as exit code 2."""


class UserError(OrchestrateError):
    """Caller mistake: bad config, bad id, quota, capacity. Exit code 1."""


class NotFoundError(UserError):
    pass


class ValidationError(UserError):
    """Config validation failure carrying a field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class QuotaError(UserError):
    pass


class IllegalTransitionError(OrchestrateError):
    """A state machine was driven along an edge that does not exist."""


class NoMoreSuggestions(OrchestrateError):
    """The strategy has nothing left to propose (budget or grid exhausted)."""
