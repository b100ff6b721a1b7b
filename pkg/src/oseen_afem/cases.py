"""Benchmark problems, manufactured data and exact errors.

Exact fields are given by stream functions, ``curl(phi) = (d phi/dx2, -d phi/dx1)``,
so the velocities are solenoidal. Derivatives are closed-form expressions
generated symbolically and compiled to numpy functions.
"""

from dataclasses import dataclass
from functools import lru_cache
import math
from typing import Callable, Optional

import numpy as np
import sympy as sy

from .errors import UnknownCaseError
from .fem import ElementQuadrature
from .mesh import Mesh, build_initial_mesh, refine_conforming
from .ocp import OcpSolution, clamp_project
from .problem import ProblemSpec

CASES = ("bubble2d", "layer2d", "lshape2d", "tshape2d")

X1, X2 = sy.symbols("x1 x2", real=True)


def _compile(expr) -> Callable[[np.ndarray], np.ndarray]:
    fn = sy.lambdify((X1, X2), expr, modules="numpy")

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(fn(x[..., 0], x[..., 1]), dtype=float), x.shape[:-1]).copy()

    evaluate.expr = expr
    return evaluate


def _vector(exprs) -> Callable[[np.ndarray], np.ndarray]:
    parts = [_compile(e) for e in exprs]

    def evaluate(x):
        return np.stack([p(x) for p in parts], axis=-1)

    evaluate.expr = tuple(exprs)
    return evaluate


def _matrix(rows) -> Callable[[np.ndarray], np.ndarray]:
    parts = [[_compile(e) for e in row] for row in rows]

    def evaluate(x):
        return np.stack([np.stack([p(x) for p in row], axis=-1) for row in parts], axis=-2)

    return evaluate


def curl(phi):
    return (sy.diff(phi, X2), -sy.diff(phi, X1))


def _lap(v):
    return sy.diff(v, X1, 2) + sy.diff(v, X2, 2)


@dataclass(frozen=True)
class ExactSolution:
    """Closed-form optimal state, pressure, adjoint state and adjoint pressure."""

    y: Callable
    grad_y: Callable
    p: Callable
    w: Callable
    grad_w: Callable
    q: Callable
    state_rhs: Callable     # -eps lap y + (c.grad) y + kappa y + grad p, before subtracting u
    target: Callable        # y + eps lap w + (c.grad) w - kappa w + grad q
    div_y: Callable
    div_w: Callable
    p_shift: float = 0.0
    q_shift: float = 0.0


def build_exact(phi_y, p, phi_w, q, eps, kappa, conv) -> ExactSolution:
    y = curl(phi_y)
    w = curl(phi_w)

    def adv(v):
        return conv[0] * sy.diff(v, X1) + conv[1] * sy.diff(v, X2)

    grad_p = (sy.diff(p, X1), sy.diff(p, X2))
    grad_q = (sy.diff(q, X1), sy.diff(q, X2))
    state = [-eps * _lap(y[i]) + adv(y[i]) + kappa * y[i] + grad_p[i] for i in range(2)]
    target = [y[i] + eps * _lap(w[i]) + adv(w[i]) - kappa * w[i] + grad_q[i] for i in range(2)]
    return ExactSolution(
        y=_vector(y),
        grad_y=_matrix([[sy.diff(y[i], X1), sy.diff(y[i], X2)] for i in range(2)]),
        p=_compile(p),
        w=_vector(w),
        grad_w=_matrix([[sy.diff(w[i], X1), sy.diff(w[i], X2)] for i in range(2)]),
        q=_compile(q),
        state_rhs=_vector(state),
        target=_vector(target),
        div_y=_compile(sy.diff(y[0], X1) + sy.diff(y[1], X2)),
        div_w=_compile(sy.diff(w[0], X1) + sy.diff(w[1], X2)),
    )


@dataclass(frozen=True)
class ManufacturedCase:
    name: str
    domain: str
    spec: ProblemSpec
    exact: Optional[ExactSolution] = None

    @property
    def has_exact(self) -> bool:
        return self.exact is not None

    def optimal_control(self, x: np.ndarray) -> np.ndarray:
        return clamp_project(-self.exact.w(x) / self.spec.theta, self.spec.lower, self.spec.upper)

    def with_overrides(self, **changes) -> "ManufacturedCase":
        """Copy with changed parameters; manufactured data are re-derived."""
        changes = {k: v for k, v in changes.items() if v is not None}
        spec = self.spec.with_(**changes)
        if self.has_exact:
            f, target, _ = derive_data(self.exact, spec)
            spec = spec.with_(f=f, y_target=target)
        return ManufacturedCase(self.name, self.domain, spec, self.exact)


def domain_mean(fn: Callable, domain: str, levels: int = 8) -> float:
    """Mean of a scalar function over a domain, by quadrature on a refined mesh."""
    mesh = build_initial_mesh(domain)
    for _ in range(levels):
        mesh = refine_conforming(mesh, np.arange(mesh.n_elements))
    quad = ElementQuadrature.build(mesh.geometry, 7)
    return float(quad.integrate(fn(quad.points)).sum() / mesh.area)


def _shifted(fn: Callable, shift: float) -> Callable:
    if shift == 0.0:
        return fn

    def evaluate(x):
        return fn(x) - shift

    return evaluate


def derive_data(exact: ExactSolution, spec: ProblemSpec):
    """Source, target and optimal control consistent with the exact fields."""
    def u_bar(x):
        return clamp_project(-exact.w(x) / spec.theta, spec.lower, spec.upper)

    def f(x):
        return exact.state_rhs(x) - u_bar(x)

    return f, exact.target, u_bar


def _with_data(name, domain, spec_kwargs, exact: ExactSolution) -> ManufacturedCase:
    # the pressures live in the zero-mean space
    p_shift = domain_mean(exact.p, domain)
    q_shift = domain_mean(exact.q, domain)
    exact = ExactSolution(**{**exact.__dict__, "p": _shifted(exact.p, p_shift),
                             "q": _shifted(exact.q, q_shift), "p_shift": p_shift, "q_shift": q_shift})
    spec = ProblemSpec(**spec_kwargs)
    f, target, _ = derive_data(exact, spec)
    return ManufacturedCase(name, domain, spec.with_(f=f, y_target=target), exact)


def _rotation(x):
    return np.stack([x[..., 1], -x[..., 0]], axis=-1)


def _constant_source(x):
    return np.ones(np.shape(x))


@lru_cache(maxsize=None)
def _library(name: str) -> ManufacturedCase:
    pi = sy.pi
    if name == "bubble2d":
        phi_y = (X1 * (1 - X1) * X2 * (1 - X2)) ** 2
        phi_w = (sy.sin(2 * pi * X1) * sy.sin(2 * pi * X2)) ** 2
        p = sy.cos(2 * pi * X1) * sy.cos(2 * pi * X2)
        q = sy.sin(2 * pi * X1) * sy.sin(2 * pi * X2)
        exact = build_exact(phi_y, p, phi_w, q, 1, 1, (X2, -X1))
        kwargs = dict(eps=1.0, kappa=1.0, convection=_rotation, c_inf_norm=math.sqrt(2.0),
                      theta=1.0, lower=(-0.5, -0.5), upper=(0.5, 0.5), rho=1.0,
                      beta=math.sin(math.pi / 8))
        return _with_data(name, "unit_square", kwargs, exact)
    if name == "layer2d":
        e100 = sy.exp(-100)
        g1 = 1 - X1 - (sy.exp(-100 * X1) - e100) / (1 - e100)
        g2 = 1 - X2 - (sy.exp(-100 * X2) - e100) / (1 - e100)
        bubble = (1 - X1 - X2) ** 2
        phi_y = X1 * X2 ** 2 * bubble * g1
        phi_w = X1 ** 2 * X2 * bubble * g2
        p = sy.cos(2 * pi * X2) / 1024
        q = sy.cos(2 * pi * X1) / 1024
        eps = sy.Rational(1, 100)
        exact = build_exact(phi_y, p, phi_w, q, eps, 1, (0, 0))
        kwargs = dict(eps=0.01, kappa=1.0, convection=None, c_inf_norm=0.0, theta=1.0,
                      lower=(0.0, 0.0), upper=(0.1, 0.1), rho=1.0, beta=math.sin(math.pi / 16))
        return _with_data(name, "unit_triangle", kwargs, exact)
    if name in ("lshape2d", "tshape2d"):
        domain, beta = ("l_shape", 0.1601) if name == "lshape2d" else ("t_shape", 0.1076)
        spec = ProblemSpec(eps=1.0, kappa=0.0, f=_constant_source, y_target=_rotation,
                           convection=None, c_inf_norm=0.0, theta=1.0, lower=(0.0, 0.0),
                           upper=(1.0, 1.0), rho=1.0, beta=beta)
        return ManufacturedCase(name, domain, spec, None)
    raise UnknownCaseError(f"unknown example {name!r}; expected one of {CASES}")


def case_library(name: str) -> ManufacturedCase:
    return _library(name)


# ---------------------------------------------------------------- errors

@dataclass(frozen=True)
class ErrorReport:
    y: float
    p: float
    w: float
    q: float
    u: float
    total: float


def compute_errors(sol: OcpSolution, case: ManufacturedCase, rho: float = None,
                   degree: int = None) -> Optional[ErrorReport]:
    """Errors of the discrete quintuple in the energy, L2 and control norms.

    Returns None when the case has no exact solution.
    """
    if not case.has_exact:
        return None
    spec = case.spec
    rho = spec.rho if rho is None else rho
    disc = sol.disc
    mesh = disc.mesh
    geom = disc.geom
    quad = disc.quad if degree is None else ElementQuadrature.build(geom, degree)
    x = quad.points
    ex = case.exact

    def energy(exact_v, exact_grad, v):
        vq = np.einsum("qj,mji->mqi", quad.bary, v[mesh.triangles])
        grad = np.einsum("mjd,mji->mid", geom.grad_bary, v[mesh.triangles])
        dv = exact_v(x) - vq
        dg = exact_grad(x) - grad[:, None]
        val = spec.eps * np.sum(dg ** 2, axis=(2, 3)) + spec.kappa * np.sum(dv ** 2, axis=2)
        return float(np.sqrt(quad.integrate(val).sum()))

    def l2_scalar(exact_s, s):
        return float(np.sqrt(quad.integrate((exact_s(x) - s[:, None]) ** 2).sum()))

    e_y = energy(ex.y, ex.grad_y, sol.y)
    e_w = energy(ex.w, ex.grad_w, sol.w)
    e_p = l2_scalar(ex.p, sol.p)
    e_q = l2_scalar(ex.q, sol.q)
    du = case.optimal_control(x) - sol.u[:, None, :]
    e_u = float(np.sqrt(quad.integrate(np.sum(du ** 2, axis=2)).sum()))
    total = math.sqrt(e_y ** 2 + rho * e_p ** 2 + e_w ** 2 + rho * e_q ** 2 + e_u ** 2)
    return ErrorReport(e_y, e_p, e_w, e_q, e_u, total)


def ndof(mesh: Mesh) -> int:
    """4 N_v + 4 N_e: two velocity fields, two pressures and the control."""
    return 4 * mesh.n_vertices + 4 * mesh.n_elements
