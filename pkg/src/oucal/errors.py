"""Exception hierarchy shared by every oucal module."""


class OUCalError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(OUCalError, ValueError):
    """theta or sigma_sq outside (0, inf), or non-finite."""


class DegenerateGrid(OUCalError, ValueError):
    """A time grid with no transitions or a non-positive step."""


class ConstantSeries(OUCalError, ValueError):
    """Zero-variance input; lag-1 correlation is undefined."""


class TooShort(OUCalError, ValueError):
    pass


class OptimizationFailed(OUCalError, RuntimeError):
    pass


class LineSearchFailed(OUCalError, RuntimeError):
    pass


class NotDescent(OUCalError, ValueError):
    """Search direction p has g.p >= 0."""


class DimensionMismatch(OUCalError, ValueError):
    pass


class CacheMismatch(OUCalError, ValueError):
    pass


class EmptyDataset(OUCalError, ValueError):
    pass


class EmptyInput(OUCalError, ValueError):
    pass
