"""Exception types shared across the package."""


class FastdualError(Exception):
    """Base class for package-specific failures."""


class NotPositiveSemidefinite(FastdualError):
    """A matrix required to be PSD (possibly within a shift cap) is not."""


class SingularKkt(FastdualError):
    """A KKT system is singular or too ill-conditioned to solve reliably.

    Carries structural diagnostics when available: ``row_rank`` of the
    constraint block and ``null_space_min_eig`` of the Hessian restricted to
    the constraint null space.
    """

    def __init__(self, msg, row_rank=None, null_space_min_eig=None):
        super().__init__(msg)
        self.row_rank = row_rank
        self.null_space_min_eig = null_space_min_eig


class UnsupportedProx(FastdualError):
    """No prox routine for this function/metric structure combination."""


class UnsupportedInner(FastdualError):
    """The inner (primal) minimizer has no routine for this problem form."""


class Infeasible(FastdualError):
    """A feasibility problem (LMI or QP) was certified infeasible."""


class CapReached(FastdualError):
    """An iteration cap was hit before the requested tolerance.

    ``result`` holds the partial state at the cap (solver result, metric, ...)
    so callers can inspect or accept it explicitly.
    """

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class RefusedUncertifiedMetric(FastdualError):
    """A solver refused to run with a metric lacking a curvature certificate."""


class ProblemFormatError(FastdualError):
    """A problem file violates the schema; message names the field path."""
