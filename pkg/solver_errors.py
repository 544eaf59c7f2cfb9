"""
Exception hierarchy for the VEM solver.

Library modules raise these; only the command-line front end turns them into
exit codes.
"""


class VemError(Exception):
    """Base class for every solver failure."""


class NonFiniteEvaluation(VemError):
    """A callback or an assembled term produced NaN or infinity."""

    def __init__(self, message, node=None, term=None):
        details = []
        if term is not None:
            details.append(f"term={term}")
        if node is not None:
            details.append(f"node={node}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.node = node
        self.term = term


class GridTooSmall(VemError, ValueError):
    """Fewer than three grid nodes were requested."""


class BadHorizon(VemError, ValueError):
    """The time horizon is empty or reversed."""


class ShapeError(VemError, ValueError):
    """Array shapes do not line up with the grid or the problem dimensions."""


class ConfigError(VemError, ValueError):
    """A run configuration failed validation."""


class ModeError(VemError):
    """An operation was called in a terminal mode where it does not exist."""


class IllConditionedTransition(VemError):
    """The fundamental matrices became numerically singular."""


class StiffnessFailure(VemError):
    """The variation-time step fell below the minimum step size."""


class Divergence(VemError):
    """The evolving state became non-finite."""

    def __init__(self, message, checkpoint=None, trace=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.trace = trace


class SingularHessian(VemError):
    """The Newton flow met a Hessian it cannot invert."""


class NoCycloid(VemError):
    """No cycloid joins the origin to the requested endpoint."""
