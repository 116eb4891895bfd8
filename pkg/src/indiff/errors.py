"""Exception types shared across the engine."""


class IndiffError(Exception):
    """Base class for all engine errors."""


class NonConvergence(IndiffError):
    """A nonlinear solve failed within its iteration budget.

    Usually signals an ill-conditioned utility specification or a position
    beyond the numeric range of the generic solver.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class StabilizationMissing(IndiffError):
    """The utility spec carries no asymptotic risk-aversion levels."""


class MultiAssetUnsupported(IndiffError):
    """Operation is defined for a single marketed security only."""


class BudgetExceeded(IndiffError):
    """Requested search exceeds the configured evaluation cap."""


class InvalidParams(IndiffError):
    """Model parameters violate a documented precondition."""


class Infeasible(IndiffError):
    """Exact replication fails at a node; signals incompleteness there."""

    def __init__(self, node, message=""):
        super().__init__(message or f"replication infeasible at node {node}")
        self.node = node


class NotBinomial(IndiffError):
    """Model does not have the required two-children-per-node structure."""


class Overflow(IndiffError):
    """An exponent left the float64 range; the caller should rescale."""

    def __init__(self, message, at=None):
        super().__init__(message)
        self.at = at


class ConfigError(IndiffError):
    """A run configuration or input file is invalid."""

    def __init__(self, message, path=None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
