"""Problem data for the control-constrained generalized Oseen problem."""

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import InvalidParameterError

VectorField = Callable[[np.ndarray], np.ndarray]


def zero_field(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients, data and discretization knobs.

    Callables take points of shape (..., 2) and return values of the same shape.
    ``convection`` must be solenoidal; ``c_inf_norm`` is its sup norm when
    known in closed form (otherwise it is estimated on the mesh).
    """

    eps: float
    kappa: float
    f: VectorField = zero_field
    y_target: VectorField = zero_field
    convection: Optional[VectorField] = None
    c_inf_norm: Optional[float] = None
    theta: float = 1.0
    lower: tuple = (-np.inf, -np.inf)
    upper: tuple = (np.inf, np.inf)
    rho: float = 1.0
    beta: Optional[float] = None
    tau_k_scale: float = 1.0
    tau_gamma: float = 1.0
    quad_degree: int = 7

    def __post_init__(self):
        if self.eps <= 0:
            raise InvalidParameterError("eps must be positive")
        if self.kappa < 0:
            raise InvalidParameterError("kappa must be non-negative")
        if self.theta <= 0:
            raise InvalidParameterError("theta must be positive")
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (2,) or hi.shape != (2,) or np.any(lo >= hi):
            raise InvalidParameterError("control bounds need lower < upper componentwise")
        if self.tau_k_scale < 0 or self.tau_gamma < 0:
            raise InvalidParameterError("stabilization parameters must be non-negative")

    @property
    def has_convection(self) -> bool:
        return self.convection is not None

    def convection_at(self, x: np.ndarray) -> np.ndarray:
        if self.convection is None:
            return np.zeros_like(np.asarray(x, dtype=float))
        return np.asarray(self.convection(x), dtype=float)

    def with_(self, **changes) -> "ProblemSpec":
        return replace(self, **changes)
