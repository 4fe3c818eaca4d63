"""Exception types shared across the package."""


class PwaDeepcError(Exception):
    """Base class for all package errors."""


class NoRegion(PwaDeepcError):
    """No polyhedron of the partition contains the queried point."""


class GridTooCoarse(PwaDeepcError):
    """Dynamic-programming value changed too much under grid refinement."""


class EmptyCluster(PwaDeepcError):
    """K-means produced an empty cluster after all restarts."""


class InsufficientData(PwaDeepcError):
    """A per-mode dataset is too short for the requested matrix depth."""


class TooShort(PwaDeepcError):
    """A sequence is too short for the requested Hankel depth/order."""


class RankDeficient(PwaDeepcError):
    """A matrix that must have full rank does not."""


class Infeasible(PwaDeepcError):
    """The equality constraints of an optimization problem are inconsistent."""


class MaxIter(PwaDeepcError):
    """An iterative solver hit its iteration limit before converging."""


class SingularWbar(PwaDeepcError):
    """The reduced dual system of the shrink-threshold formula is singular."""


class SolverFailure(PwaDeepcError):
    """A receding-horizon step failed to produce a usable solution."""


class ZeroDenominator(PwaDeepcError):
    """A performance-indicator denominator is zero."""


class MissingSolution(PwaDeepcError):
    """A per-step solver solution required for analysis was not retained."""


class ConfigError(PwaDeepcError):
    """An experiment configuration file is invalid."""
