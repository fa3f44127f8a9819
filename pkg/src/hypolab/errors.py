"""Exception hierarchy shared by all hypolab modules."""


class HypolabError(Exception):
    """Base class for all errors raised by hypolab."""


class ParameterError(HypolabError, ValueError):
    """A parameter lies outside its documented range."""


class AdmissibilityError(HypolabError):
    """A weight or exponent combination is not admissible for the model."""


class CapabilityError(HypolabError):
    """The requested combination of model, space or method is not supported."""


class ResolutionError(HypolabError):
    """The discretization is too coarse for the requested accuracy."""


class RangeError(HypolabError, OverflowError):
    """A weighted quantity does not fit in double precision."""


class SolverError(HypolabError):
    """An iterative or direct solver failed to converge."""


class ContourError(HypolabError):
    """A spectral contour passes through or too close to the spectrum."""


class ConditioningError(HypolabError):
    """A matrix is singular or too ill-conditioned for the computation."""


class InfeasibilityError(HypolabError):
    """No parameter on the search ladder satisfies the requested constraint."""


class UsageError(HypolabError):
    """Malformed configuration or command line input."""


class DataError(HypolabError):
    """Input data is unsuitable, e.g. a fit window that is too short."""
