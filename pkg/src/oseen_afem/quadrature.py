"""Quadrature rules on the reference triangle and the unit interval."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points and weights on the reference triangle.

    Weights sum to the reference area 1/2. ``bary`` has shape (nq, 3).
    """

    bary: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def normalized_weights(self) -> np.ndarray:
        # weights relative to the element area
        return 2.0 * self.weights


@lru_cache(maxsize=None)
def triangle_rule(degree: int = 7) -> QuadratureRule:
    """Collapsed (Duffy) Gauss product rule exact for polynomials of ``degree``.

    Uses Gauss-Jacobi points in the collapsed direction so that the Jacobian
    factor is absorbed into the weight.
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    n = degree // 2 + 1
    t, wt = roots_jacobi(n, 1.0, 0.0)
    s, ws = roots_legendre(n)
    u = 0.5 * (1.0 + t)
    wu = wt / 4.0
    v = 0.5 * (1.0 + s)
    wv = ws / 2.0
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = uu.ravel()
    y = (vv * (1.0 - uu)).ravel()
    w = np.outer(wu, wv).ravel()
    bary = np.column_stack([1.0 - x - y, x, y])
    bary.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(bary=bary, weights=w, degree=degree)


@lru_cache(maxsize=None)
def line_rule(degree: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights on [0, 1], weights summing to 1."""
    n = degree // 2 + 1
    s, w = roots_legendre(n)
    pts = 0.5 * (1.0 + s)
    wts = 0.5 * w
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts
