"""Element residuals, edge jumps, oscillation and the residual-type indicators.

Element residuals are P1 vector polynomials stored as coefficients in the
scaled monomial basis ``1, xi1, xi2`` with ``xi = (x - centroid) / h``,
shape (m, 3, 2).
"""

from dataclasses import dataclass

import numpy as np

from .errors import NotInteriorEdgeError
from .fem import eval_poly, l2_project, p1_to_monomial
from .ocp import OcpSolution


def projection_degree(velocity_degree: int = 1, pressure_degree: int = 0, control_degree: int = 0) -> int:
    return max(velocity_degree, pressure_degree - 1, control_degree)


@dataclass(frozen=True)
class ResidualData:
    """Residual quantities of both the state and the adjoint equation."""

    R_st: np.ndarray          # (m, nb, 2) element residual coefficients
    R_ad: np.ndarray
    osc_st: np.ndarray        # (m,) L2 norms of the oscillation
    osc_ad: np.ndarray
    R_st_norm: np.ndarray     # (m,) L2 norms of the element residuals
    R_ad_norm: np.ndarray
    div_y: np.ndarray         # (m,) L2 norms of div y_T
    div_w: np.ndarray
    trace_st: np.ndarray      # (m, 3, 2) one-sided edge traces per local edge
    trace_ad: np.ndarray
    jump_st: np.ndarray       # (n_edges, 2), zero on boundary edges
    jump_ad: np.ndarray
    degree: int

    def element_residual(self, k: int, which: str) -> np.ndarray:
        return self._pick(which, self.R_st, self.R_ad)[k]

    def _pick(self, which, st, ad):
        if which == "st":
            return st
        if which == "ad":
            return ad
        raise ValueError("which must be 'st' or 'ad'")


def velocity_gradients(sol: OcpSolution, v: np.ndarray) -> np.ndarray:
    """Elementwise gradients, entry [m, i, d] = d v_i / d x_d."""
    disc = sol.disc
    return np.einsum("mjd,mji->mid", disc.geom.grad_bary, v[disc.mesh.triangles])


def compute_residuals(sol: OcpSolution, degree: int = None) -> ResidualData:
    disc = sol.disc
    spec = disc.spec
    mesh = disc.mesh
    geom = disc.geom
    quad = disc.quad
    degree = projection_degree() if degree is None else degree
    nb = (degree + 1) * (degree + 2) // 2

    def pad(coef):
        out = np.zeros((coef.shape[0], nb, coef.shape[2]))
        out[:, : coef.shape[1]] = coef
        return out

    grad_y = velocity_gradients(sol, sol.y)
    grad_w = velocity_gradients(sol, sol.w)
    adv_y = np.einsum("mqd,mid->mqi", disc.cq, grad_y)
    adv_w = np.einsum("mqd,mid->mqi", disc.cq, grad_w)
    f_q = disc.f_q
    t_q = disc.target_q

    pf = l2_project(f_q, geom, quad, degree)
    pt = l2_project(t_q, geom, quad, degree)
    pay = l2_project(adv_y, geom, quad, degree)
    paw = l2_project(adv_w, geom, quad, degree)
    y_mono = pad(p1_to_monomial(sol.y[mesh.triangles], geom))
    w_mono = pad(p1_to_monomial(sol.w[mesh.triangles], geom))
    u_mono = np.zeros_like(pf)
    u_mono[:, 0] = sol.u

    kap = spec.kappa
    # the P1 Laplacian and the P0 pressure gradient vanish elementwise
    R_st = pf + u_mono - pay - kap * y_mono
    R_ad = y_mono - pt + paw - kap * w_mono

    x = quad.points
    osc_st_q = (f_q - eval_poly(pf, geom, x)) - (adv_y - eval_poly(pay, geom, x))
    osc_ad_q = -(t_q - eval_poly(pt, geom, x)) + (adv_w - eval_poly(paw, geom, x))

    def norm(values):
        return np.sqrt(np.maximum(quad.integrate(np.sum(values ** 2, axis=-1)), 0.0))

    n = geom.normals
    p = sol.p[:, None, None]
    q = sol.q[:, None, None]
    trace_st = -spec.eps * np.einsum("mid,med->mei", grad_y, n) + p * n
    trace_ad = -spec.eps * np.einsum("mid,med->mei", grad_w, n) - q * n

    def jumps(trace):
        out = np.zeros((len(mesh.edges), 2))
        np.add.at(out, mesh.tri_edges.ravel(), trace.reshape(-1, 2))
        out[mesh.boundary_edges] = 0.0
        return out

    root_area = np.sqrt(geom.area)
    return ResidualData(
        R_st=R_st, R_ad=R_ad,
        osc_st=norm(osc_st_q), osc_ad=norm(osc_ad_q),
        R_st_norm=norm(eval_poly(R_st, geom, x)), R_ad_norm=norm(eval_poly(R_ad, geom, x)),
        div_y=np.abs(np.trace(grad_y, axis1=1, axis2=2)) * root_area,
        div_w=np.abs(np.trace(grad_w, axis1=1, axis2=2)) * root_area,
        trace_st=trace_st, trace_ad=trace_ad,
        jump_st=jumps(trace_st), jump_ad=jumps(trace_ad),
        degree=degree,
    )


def edge_jump(mesh, data: ResidualData, edge: int, which: str) -> np.ndarray:
    if mesh.boundary_edges[edge]:
        raise NotInteriorEdgeError(f"edge {edge} lies on the boundary")
    return data._pick(which, data.jump_st, data.jump_ad)[edge].copy()


def oscillation_norm(data: ResidualData, k: int, which: str) -> float:
    return float(data._pick(which, data.osc_st, data.osc_ad)[k])


_GAUSS2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def clamped_affine_l2(values: np.ndarray, area: np.ndarray, lower: float, upper: float,
                      const: np.ndarray) -> np.ndarray:
    """Exact ||clamp(l) - const||^2 over triangles for affine l with vertex values ``values``.

    The integral is rewritten as a 1D integral against the piecewise linear
    density of l over the triangle. Split at the vertex values and at the
    bounds, every piece is a cubic, so two Gauss points per piece are exact.
    """
    a, b, c = np.sort(values, axis=1).T
    brk = np.sort(np.column_stack([a, b, c, np.clip(lower, a, c), np.clip(upper, a, c)]), axis=1)
    span = c - a
    flat = span <= 1e-14 * np.maximum(1.0, np.abs(c))
    total = np.where(flat, area * (np.clip(a, lower, upper) - const) ** 2, 0.0)
    safe_span = np.where(flat, 1.0, span)
    lo_gap = np.where(b - a > 0, b - a, 1.0)
    hi_gap = np.where(c - b > 0, c - b, 1.0)
    for j in range(4):
        left, right = brk[:, j], brk[:, j + 1]
        width = right - left
        mid = 0.5 * (left + right)
        for g in _GAUSS2:
            t = left + g * width
            rising = np.where(mid < b, (t - a) / lo_gap, (c - t) / hi_gap)
            density = 2.0 * area / safe_span * rising
            total += np.where(flat, 0.0, 0.5 * width * density * (np.clip(t, lower, upper) - const) ** 2)
    return total


def control_indicator(sol: OcpSolution) -> np.ndarray:
    """Elementwise L2 distance between clamp(-w_T/theta) and u_T, integrated exactly."""
    disc = sol.disc
    spec = disc.spec
    vals = -sol.w[disc.mesh.triangles] / spec.theta
    sq = sum(clamped_affine_l2(vals[:, :, i], disc.geom.area, spec.lower[i], spec.upper[i], sol.u[:, i])
             for i in range(2))
    return np.sqrt(np.maximum(sq, 0.0))


def jump_terms(mesh, data: ResidualData, which: str) -> np.ndarray:
    """Sum over the interior edges of K of h_K * ||[R_gamma]||^2_gamma."""
    jump = data._pick(which, data.jump_st, data.jump_ad)
    geom = mesh.geometry
    sq = np.sum(jump[mesh.tri_edges] ** 2, axis=2) * geom.lengths
    sq = np.where(mesh.boundary_edges[mesh.tri_edges], 0.0, sq)
    return geom.h * sq.sum(axis=1)


def residual_indicators(mesh, data: ResidualData):
    """Per-element (eta_y, eta_p, eta_w, eta_q) of residual type.

    The generic multiplicative constant is set to one, so the values are
    meaningful up to a fixed factor.
    """
    h2 = mesh.geometry.h ** 2
    eta_y2 = data.div_y ** 2 + jump_terms(mesh, data, "st") + h2 * (data.R_st_norm ** 2 + data.osc_st ** 2)
    eta_w2 = data.div_w ** 2 + jump_terms(mesh, data, "ad") + h2 * (data.R_ad_norm ** 2 + data.osc_ad ** 2)
    eta_y = np.sqrt(eta_y2)
    eta_w = np.sqrt(eta_w2)
    return eta_y, eta_y.copy(), eta_w, eta_w.copy()
