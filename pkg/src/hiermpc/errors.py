"""Exception types raised across the package."""


class HierMpcError(Exception):
    """Base class for all package errors."""


class DimensionError(HierMpcError, ValueError):
    """Array shapes do not agree with the model they are used with."""


class SingularLoop(HierMpcError):
    """The algebraic coupling loop ``I - Ev1 @ Ev2`` is (numerically) singular."""


class SingularSteadyMap(HierMpcError):
    """No unique steady state/input pair exists for a requested output set-point."""


class IllConditionedHessian(HierMpcError):
    """The condensed MPC Hessian is too badly conditioned to invert safely."""


class NonFinite(HierMpcError, ValueError):
    """An input array contains NaN or Inf."""


class GridTooSmall(HierMpcError, ValueError):
    """The set-point grid has fewer nodes than a quadratic fit needs."""


class RankDeficient(HierMpcError):
    """The quadratic regression matrix does not have full column rank."""


class NotPositiveDefinite(HierMpcError):
    """The fitted quadratic has no unique minimiser on the free coordinates."""


class InvalidModel(HierMpcError, ValueError):
    """A plant definition failed validation.

    The offending issues are available in ``issues``.
    """

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues) or "invalid model")


class HandoverError(HierMpcError):
    """An operator handover request cannot be applied."""


class NoConvergentBeta(HierMpcError):
    """No filter coefficient on the grid gives a spectral radius below one."""
