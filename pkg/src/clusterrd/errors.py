"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class ClusterRDError(Exception):
    """Base class for every error raised by the package."""


class SchemaError(ClusterRDError, ValueError):
    """Input file does not match the expected ``cluster,x,y`` schema."""


class EmptyInput(ClusterRDError, ValueError):
    pass


class NonFiniteValue(ClusterRDError, ValueError):
    def __init__(self, row: int, message: str | None = None):
        self.row = row
        super().__init__(message or f"non-finite value in row {row}")


class InvalidConfig(ClusterRDError, ValueError):
    pass


class DegenerateKernel(ClusterRDError, ValueError):
    pass


class _SideError(ClusterRDError, ValueError):
    def __init__(self, side: str, message: str | None = None):
        self.side = side
        super().__init__(message or f"{type(self).__name__} on side '{side}'")


class InsufficientSupport(_SideError):
    """Too few in-window observations (or distinct x values) on one side."""


class DegenerateDesign(_SideError):
    """Side-specific normal equations are numerically singular."""


class TooFewClusters(_SideError):
    """Companion-cluster selection cannot find enough clusters on one side."""


class ShapeMismatch(ClusterRDError, ValueError):
    pass


class NegativeM(ClusterRDError, ValueError):
    pass


class ZeroCurvature(ClusterRDError, ValueError):
    pass


class InsufficientNeighbors(ClusterRDError, ValueError):
    pass


class NoEligibleNeighbor(ClusterRDError, ValueError):
    def __init__(self, g: int, i: int, d: int):
        self.g, self.i, self.d = g, i, d
        super().__init__(f"unit ({g}, {i}) has no eligible neighbor in companion set {d}")


class IncompletePlan(ClusterRDError, ValueError):
    pass


class ZeroWeights(ClusterRDError, ValueError):
    pass


class AllReplicationsFailed(ClusterRDError, RuntimeError):
    pass
