"""Fixed-point solution of the discrete optimality system."""

from dataclasses import dataclass, field
import logging
import warnings

import numpy as np

from .errors import InvalidParameterError, NonConvergenceError
from .fem import Discretization, SaddleSolver
from .mesh import Mesh
from .problem import ProblemSpec

log = logging.getLogger(__name__)


def clamp_project(v, lower, upper) -> np.ndarray:
    """Componentwise projection onto the box [lower, upper]."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    if np.any(lo >= hi):
        raise InvalidParameterError("box bounds need lower < upper in every component")
    return np.minimum(hi, np.maximum(lo, np.asarray(v, dtype=float)))


def discrete_vi_solution(w: np.ndarray, spec: ProblemSpec, mesh: Mesh) -> np.ndarray:
    """Piecewise-constant control solving the discrete variational inequality.

    With P0 controls the inequality decouples per element and component, so
    the solution is the clamp of the element mean of -w/theta. The mean of a
    P1 field is the average of its vertex values.
    """
    if spec.theta <= 0:
        raise InvalidParameterError("theta must be positive")
    mean_w = np.asarray(w)[mesh.triangles].mean(axis=1)
    return clamp_project(-mean_w / spec.theta, spec.lower, spec.upper)


@dataclass
class OcpConfig:
    tol: float = 1e-11
    max_iter: int = 200
    damping: float = 1.0
    verbose: bool = False


@dataclass
class OcpSolution:
    y: np.ndarray
    p: np.ndarray
    w: np.ndarray
    q: np.ndarray
    u: np.ndarray
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    disc: Discretization = None

    @property
    def mesh(self) -> Mesh:
        return self.disc.mesh


def control_norm(u: np.ndarray, area: np.ndarray) -> float:
    return float(np.sqrt(np.sum(area[:, None] * u * u)))


def solve_ocp(mesh: Mesh, spec: ProblemSpec, config: OcpConfig = None,
              disc: Discretization = None) -> OcpSolution:
    """Iterate u -> clamp(mean(-w(y(u))) / theta) with automatic damping.

    The returned quintuple is consistent: (y, p) solves the state system with
    the returned u and (w, q) the adjoint system with the returned y.
    """
    config = config or OcpConfig()
    if not 0 < config.damping <= 1:
        raise InvalidParameterError("damping must lie in (0, 1]")
    disc = disc or Discretization(mesh, spec)
    area = disc.geom.area
    state = SaddleSolver(disc.state_matrix)
    adjoint = SaddleSolver(disc.adjoint_matrix)

    u = clamp_project(np.zeros((mesh.n_elements, 2)), spec.lower, spec.upper)
    lam = config.damping
    history = []
    for k in range(1, config.max_iter + 1):
        y, p = disc.unpack(state.solve(disc.gather_load(disc.state_local_load(u))))
        w, q = disc.unpack(adjoint.solve(disc.gather_load(disc.adjoint_local_load(y))))
        u_star = discrete_vi_solution(w, spec, mesh)
        res = control_norm(u_star - u, area)
        history.append(res)
        if config.verbose:
            log.info("ocp iter %d residual %.6e", k, res)
        else:
            log.debug("ocp iter %d residual %.6e", k, res)
        if res <= config.tol * (1.0 + control_norm(u, area)):
            tail = np.diff(history[-5:])
            if len(history) >= 5 and np.any(tail > 0):
                warnings.warn("fixed-point residual not monotone over the final iterations",
                              RuntimeWarning, stacklevel=2)
            return OcpSolution(y, p, w, q, u, k, res, history, disc)
        if len(history) > 1 and res > history[-2]:
            lam *= 0.5
        u = (1.0 - lam) * u + lam * u_star
    raise NonConvergenceError(
        f"fixed-point iteration did not converge in {config.max_iter} steps "
        f"(last residual {history[-1]:.3e})", history)
