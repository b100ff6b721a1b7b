"""Exception types raised across the package."""


class AfemError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(AfemError, ValueError):
    """A physical or numerical parameter is outside its admissible range."""


class InvalidDomainError(InvalidParameterError):
    pass


class MissingInfSupError(InvalidParameterError):
    """Guaranteed estimates need a positive inf-sup constant."""


class RefinementError(AfemError):
    pass


class DegenerateElementError(AfemError):
    pass


class SolverFailure(AfemError):
    pass


class NonConvergenceError(AfemError):
    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class EquilibrationError(AfemError):
    pass


class CompatibilityError(AfemError):
    pass


class CertificationError(AfemError):
    pass


class ModeError(AfemError, ValueError):
    pass


class NotInteriorEdgeError(AfemError, ValueError):
    pass


class UnknownCaseError(AfemError, KeyError):
    pass
