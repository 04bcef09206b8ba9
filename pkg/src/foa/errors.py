"""Exception hierarchy shared across the federation modules."""


class FoaError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(FoaError, ValueError):
    pass


class NoChange(FoaError):
    """A mutation left every field of a VCV unchanged."""


class ProtocolError(FoaError):
    pass


class Conflict(FoaError):
    pass


class Infeasible(FoaError):
    def __init__(self, uncovered, message=None):
        self.uncovered = list(uncovered)
        super().__init__(message or f"no eligible agent for subtasks: {', '.join(map(str, self.uncovered))}")


class EmptyDecomposition(FoaError):
    pass


class ConsensusFailed(FoaError):
    pass


class Unavailable(FoaError):
    """The broker has been shut down."""


class AgentTimeout(FoaError):
    """An agent call did not complete within its per-call budget."""


class AgentCrash(FoaError):
    """An agent failed hard mid-operation."""


class Refused(FoaError):
    """An agent declined a subtask under its spec rules."""
