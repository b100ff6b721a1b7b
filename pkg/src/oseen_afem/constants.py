"""Explicit constants entering the guaranteed estimator."""

from dataclasses import dataclass
import math

import numpy as np

from .errors import InvalidDomainError, InvalidParameterError, MissingInfSupError


def poincare_global(box_sides) -> float:
    """Poincare constant of a box with the given side lengths."""
    sides = np.asarray(box_sides, dtype=float)
    if sides.size == 0 or np.any(sides <= 0):
        raise InvalidDomainError("box sides must be positive")
    return float(1.0 / (math.pi * math.sqrt(np.sum(1.0 / sides ** 2))))


def _check_eps(eps, kappa):
    if eps <= 0:
        raise InvalidParameterError("diffusion eps must be positive")
    if kappa < 0:
        raise InvalidParameterError("reaction kappa must be non-negative")


def c_omega(eps: float, kappa: float, c_poincare: float) -> float:
    _check_eps(eps, kappa)
    value = c_poincare / math.sqrt(eps)
    if kappa > 0:
        value = min(value, 1.0 / math.sqrt(kappa))
    return value


def c_element(h, eps: float, kappa: float):
    """Local Poincare-type constant; vectorized over ``h``."""
    _check_eps(eps, kappa)
    value = np.asarray(h, dtype=float) / (math.pi * math.sqrt(eps))
    if kappa > 0:
        value = np.minimum(value, 1.0 / math.sqrt(kappa))
    return value if value.ndim else float(value)


def c_ct(eps: float, c_om: float, c_inf_norm: float) -> float:
    if eps <= 0:
        raise InvalidParameterError("diffusion eps must be positive")
    return 1.0 + c_om / math.sqrt(eps) * c_inf_norm


def c_is(eps: float, kappa: float, c_poincare: float, beta) -> float:
    if beta is None or beta <= 0:
        raise MissingInfSupError("a positive inf-sup constant beta is required")
    _check_eps(eps, kappa)
    return math.sqrt(eps + kappa * c_poincare ** 2) / beta


def reliability_weights(mu: float, omega: float, rho: float, c_om: float):
    """Weights multiplying the squared y, w and u indicators."""
    k = 1.0 + rho * omega
    c = c_om
    d_y = 2 + 2 * mu * c ** 6 + 4 * k * (c ** 4 + mu * c ** 8 + 2 * mu * c ** 12)
    d_w = 2 + mu * c ** 2 + 2 * mu * k * (c ** 4 + 2 * c ** 8)
    d_u = 2 + 2 * mu * c ** 8 + 4 * k * (c ** 2 + 2 * c ** 6 + mu * c ** 10 + 2 * mu * c ** 14)
    return d_y, d_w, d_u


@dataclass(frozen=True)
class ReliabilityConstants:
    c_poincare: float
    c_omega: float
    c_ct: float
    c_is: float
    beta: float
    mu: float
    omega: float
    d_y: float
    d_w: float
    d_u: float
    rho: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def reliability_constants(eps, kappa, theta, rho, beta, c_inf_norm, box_sides) -> ReliabilityConstants:
    if theta <= 0:
        raise InvalidParameterError("regularization theta must be positive")
    if rho < 0:
        raise InvalidParameterError("norm weight rho must be non-negative")
    cp = poincare_global(box_sides)
    com = c_omega(eps, kappa, cp)
    cct = c_ct(eps, com, c_inf_norm)
    cis = c_is(eps, kappa, cp, beta)
    mu = 4.0 / theta ** 2
    omega = cis ** 2 * (1 + cct) ** 2
    d_y, d_w, d_u = reliability_weights(mu, omega, rho, com)
    return ReliabilityConstants(cp, com, cct, cis, float(beta), mu, omega, d_y, d_w, d_u, float(rho))
