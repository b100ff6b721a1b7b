"""Equilibrated edge fluxes, element tensors and the guaranteed indicators.

Flux moments. For an edge e with endpoints z0 = edges[e, 0], z1 = edges[e, 1]
the unknowns are the moments (g_{e,K0}, phi_z e_i)_e of the flux seen from
K0 = edge_tris[e, 0]; the flux seen from the other triangle is the negative.
For every element K and vertex z of K the moment equations read

    sum over the two edges of K through z of (g_{e,K}, phi_z e_i)_e = -l_K(phi_z e_i),

where l_K is the local residual functional of the discrete equation. The
equations of different vertices decouple. Among all solutions we take the
one closest (in an edge-length weighted norm) to the averaged flux, which
gives g + R_{e,K} = half the jump on interior edges and zero on boundary
edges. Interior patches are solvable because the discrete residual vanishes
on interior hat functions; their one-dimensional kernel is removed by a
rank-one regularization that does not change the least-norm correction.

Element tensors. Each row of sigma is a P2 vector field expanded in the
scaled monomials. Its constraints (negative divergence equals the residual,
normal trace equals the flux data with the quadratic edge mode set to zero)
have rank 11 out of 12; the one-dimensional kernel is the curl of the cubic
bubble. The minimum L2 norm solution is a particular solution corrected
along that kernel direction.
"""

from dataclasses import dataclass
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constants import ReliabilityConstants, c_element
from .errors import (CertificationError, CompatibilityError, EquilibrationError,
                     MissingInfSupError)
from .fem import ElementQuadrature, eval_poly, monomials, scaled_coords
from .mesh import EDGE_VERTICES, Mesh
from .ocp import OcpSolution
from .quadrature import line_rule
from .residual import ResidualData

CERT_TOL = 1e-9
# elements whose data are pure round-off are measured against this fraction
# of the global data magnitude
SCALE_FLOOR = 1e-8

_EDGE_MASS_INV = np.array([[2.0, -1.0], [-1.0, 2.0]])


@dataclass(frozen=True)
class EdgeFluxSet:
    """Endpoint values of g_{e,K0} (K0 = edge_tris[e, 0]), shape (n_edges, 2, 2).

    ``values[e, a, i]`` is component i at endpoint ``edges[e, a]``.
    """

    mesh: Mesh
    values: np.ndarray
    moments: np.ndarray
    moment_residual: np.ndarray   # (m, 3, 2)
    moment_scale: np.ndarray      # (m,)

    def element_values(self) -> np.ndarray:
        """Flux g_{gamma,K} on each local edge at its (start, end), shape (m, 3, 2, 2)."""
        return oriented_edge_values(self.mesh, self.values)

    @property
    def max_relative_moment_residual(self) -> float:
        r = np.abs(self.moment_residual).max(axis=(1, 2))
        floor = SCALE_FLOOR * max(self.moment_scale.max(initial=0.0), np.finfo(float).tiny)
        return float(np.max(r / np.maximum(self.moment_scale, floor), initial=0.0))


def oriented_edge_values(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Edge quantities at endpoints, oriented and signed for each element."""
    t = mesh.triangles
    te = mesh.tri_edges
    m = len(t)
    sign = np.where(mesh.edge_tris[te, 0] == np.arange(m)[:, None], 1.0, -1.0)
    start = t[:, EDGE_VERTICES[:, 0]]
    forward = mesh.edges[te, 0] == start
    v = values[te]  # (m, 3, 2, 2)
    v = np.where(forward[..., None, None], v, v[:, :, ::-1])
    return sign[..., None, None] * v


class FluxEquilibrator:
    """Factorized vertex-patch moment system of one mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        t = mesh.triangles
        m = len(t)
        ne = len(mesh.edges)
        te = mesh.tri_edges
        edge_len = np.linalg.norm(mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]], axis=1)
        sign = np.where(mesh.edge_tris[te, 0] == np.arange(m)[:, None], 1.0, -1.0)
        rows, cols, vals = [], [], []
        for loc in range(3):
            for end in range(2):
                j = EDGE_VERTICES[loc, end]
                e = te[:, loc]
                vertex = t[:, j]
                which_end = np.where(mesh.edges[e, 0] == vertex, 0, 1)
                rows.append(3 * np.arange(m) + j)
                cols.append(2 * e + which_end)
                vals.append(sign[:, loc])
        self.A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(3 * m, 2 * ne))
        self.edge_len = edge_len
        self.D = sp.diags(np.repeat(edge_len, 2))
        L = (self.A @ self.D @ self.A.T).tocsr()
        interior = ~mesh.boundary_vertices
        rows_of_vertex = t.ravel()
        keep = interior[rows_of_vertex]
        P = sp.csr_matrix((np.ones(keep.sum()), (np.flatnonzero(keep), rows_of_vertex[keep])),
                          shape=(3 * m, mesh.n_vertices))
        alpha = float(edge_len.mean()) if ne else 1.0
        self.system = (L + alpha * (P @ P.T)).tocsc()
        try:
            self.lu = spla.splu(self.system)
        except RuntimeError as exc:
            raise EquilibrationError(f"vertex-patch system is singular: {exc}") from exc

    def prior(self, trace: np.ndarray) -> np.ndarray:
        """Moments of the averaged flux; ``trace`` are one-sided traces (m, 3, 2)."""
        mesh = self.mesh
        e0, e1 = mesh.edge_tris[:, 0], mesh.edge_tris[:, 1]
        loc0 = np.argmax(mesh.tri_edges[e0] == np.arange(len(e0))[:, None], axis=1)
        r0 = trace[e0, loc0]
        g = -r0.copy()
        inner = e1 >= 0
        loc1 = np.argmax(mesh.tri_edges[e1[inner]] == np.flatnonzero(inner)[:, None], axis=1)
        r1 = trace[e1[inner], loc1]
        g[inner] = 0.5 * (r1 - r0[inner])
        # constant flux: each endpoint moment is g * |e| / 2
        mom = 0.5 * self.edge_len[:, None] * g
        return np.repeat(mom, 2, axis=0)  # (2 * n_edges, 2)

    def solve(self, local_residual: np.ndarray, trace: np.ndarray) -> EdgeFluxSet:
        m = self.mesh.n_elements
        b = -local_residual.reshape(3 * m, 2)
        mu0 = self.prior(trace)
        lam = self.lu.solve(b - self.A @ mu0)
        mu = mu0 + self.D @ (self.A.T @ lam)
        resid = (self.A @ mu - b).reshape(m, 3, 2)
        moments = mu.reshape(-1, 2, 2)  # (edge, end, component)
        values = (2.0 / self.edge_len)[:, None, None] * np.einsum("ab,ebi->eai", _EDGE_MASS_INV, moments)
        terms = np.abs(self.A) @ np.abs(mu)
        scale = np.maximum(np.abs(b), terms).reshape(m, 3, 2).max(axis=(1, 2))
        return EdgeFluxSet(self.mesh, values, moments, resid, scale)


def local_residual_functional(sol: OcpSolution, which: str) -> np.ndarray:
    disc = sol.disc
    if which == "st":
        return disc.state_local_residual(sol.u, sol.y, sol.p)
    if which == "ad":
        return disc.adjoint_local_residual(sol.y, sol.w, sol.q)
    raise ValueError("which must be 'st' or 'ad'")


def equilibrate(sol: OcpSolution, data: ResidualData, which: str,
                equilibrator: FluxEquilibrator = None) -> EdgeFluxSet:
    eq = equilibrator or FluxEquilibrator(sol.disc.mesh)
    trace = data.trace_st if which == "st" else data.trace_ad
    return eq.solve(local_residual_functional(sol, which), trace)


# ---------------------------------------------------------------- element tensors

# quadratic-in-s coefficients of the six monomials along x(s) = P + s (Q - P)
def _edge_monomial_coeffs(xi_p: np.ndarray, d: np.ndarray) -> np.ndarray:
    p1, p2 = xi_p[..., 0], xi_p[..., 1]
    d1, d2 = d[..., 0], d[..., 1]
    one = np.ones_like(p1)
    zero = np.zeros_like(p1)
    rows = [
        (one, zero, zero),
        (p1, d1, zero),
        (p2, d2, zero),
        (p1 * p1, 2 * p1 * d1, d1 * d1),
        (p1 * p2, p1 * d2 + p2 * d1, d1 * d2),
        (p2 * p2, 2 * p2 * d2, d2 * d2),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)  # (..., 6, 3)


@dataclass(frozen=True)
class ElementTensors:
    """Coefficients of sigma, shape (m, 2, 12): row i of sigma, then
    6 coefficients of its first and 6 of its second component."""

    coef: np.ndarray
    norm: np.ndarray                 # (m,) L2 norm of sigma on K
    constraint_residual: np.ndarray  # (m,) relative residual of the constraints
    compatibility: np.ndarray        # (m,) relative divergence-theorem defect


def tensor_constraints(geom, elements=None):
    """Constraint matrices (m, 12, 12) in the scaled monomial basis."""
    sl = slice(None) if elements is None else elements
    coords = geom.coords[sl]
    h = geom.h[sl]
    xc = geom.centroid[sl]
    normals = geom.normals[sl]
    m = len(h)
    C = np.zeros((m, 12, 12))
    # h * (-div tau) in the basis (1, xi1, xi2); alpha = 0..5, beta = 6..11
    C[:, 0, 1] = -1.0
    C[:, 0, 8] = -1.0
    C[:, 1, 3] = -2.0
    C[:, 1, 10] = -1.0
    C[:, 2, 4] = -1.0
    C[:, 2, 11] = -2.0
    for loc in range(3):
        P = coords[:, EDGE_VERTICES[loc, 0]]
        Q = coords[:, EDGE_VERTICES[loc, 1]]
        T = _edge_monomial_coeffs((P - xc) / h[:, None], (Q - P) / h[:, None])  # (m, 6, 3)
        n = normals[:, loc]
        rows = slice(3 + 3 * loc, 6 + 3 * loc)
        C[:, rows, :6] = np.transpose(T * n[:, 0, None, None], (0, 2, 1))
        C[:, rows, 6:] = np.transpose(T * n[:, 1, None, None], (0, 2, 1))
    return C


def tensor_rhs(h: np.ndarray, R: np.ndarray, edge_data: np.ndarray) -> np.ndarray:
    """Right-hand sides (m, 12, 2) from residual coefficients (m, 3, 2) and edge
    endpoint data (m, 3, 2, 2) indexed (edge, start/end, component)."""
    m = len(h)
    d = np.zeros((m, 12, 2))
    d[:, 0:3] = h[:, None, None] * R[:, :3]
    t0 = edge_data[:, :, 0]
    t1 = edge_data[:, :, 1]
    for loc in range(3):
        d[:, 3 + 3 * loc] = t0[:, loc]
        d[:, 4 + 3 * loc] = t1[:, loc] - t0[:, loc]
    return d


def monomial_mass(geom, quad_points, quad_weights, degree=2):
    phi = monomials(scaled_coords(geom, quad_points), degree)
    return np.einsum("mq,mqa,mqb->mab", quad_weights, phi, phi)


def local_tensors(geom, quad, R: np.ndarray, edge_data: np.ndarray) -> ElementTensors:
    """Minimum-norm P2 tensors meeting the divergence and trace constraints."""
    C = tensor_constraints(geom)
    d = tensor_rhs(geom.h, R, edge_data)
    m = len(geom.h)
    U, S, Vt = np.linalg.svd(C)
    if m and np.any(S[:, 10] <= 1e-10 * S[:, 0]):
        raise CompatibilityError("element tensor constraints lost rank; degenerate element")
    inv = np.where(np.arange(12) < 11, 1.0 / np.where(S > 0, S, 1.0), 0.0)
    x = np.einsum("mba,mb,mbc->mac", Vt, inv, np.einsum("mba,mbc->mac", U, d))
    null = Vt[:, 11]  # (m, 12)
    M6 = monomial_mass(geom, quad.points, quad.weights, 2)
    M12 = np.zeros((m, 12, 12))
    M12[:, :6, :6] = M6
    M12[:, 6:, 6:] = M6
    Mn = np.einsum("mab,mb->ma", M12, null)
    t = -np.einsum("ma,mac->mc", Mn, x) / np.einsum("ma,ma->m", Mn, null)[:, None]
    x = x + null[:, :, None] * t[:, None, :]
    coef = np.transpose(x, (0, 2, 1))  # (m, row, 12)
    norm2 = np.einsum("mra,mab,mrb->m", coef, M12, coef)
    resid = np.einsum("mab,mbc->mac", C, x) - d
    dscale = np.abs(d).max(axis=(1, 2))
    floor = SCALE_FLOOR * max(dscale.max(initial=0.0), np.finfo(float).tiny)
    rel = np.abs(resid).max(axis=(1, 2)) / np.maximum(dscale, floor)
    compat = _compatibility_defect(geom, R, edge_data)
    return ElementTensors(coef, np.sqrt(np.maximum(norm2, 0.0)), rel, compat)


def _compatibility_defect(geom, R, edge_data):
    """Relative defect of the divergence theorem for the tensor data."""
    # the integral of R over K is area * R(centroid) = area * R[:, 0]
    vol = geom.area[:, None] * R[:, 0]
    bnd = 0.5 * geom.lengths[:, :, None] * edge_data.sum(axis=2)
    total = vol + bnd.sum(axis=1)
    mags = np.abs(vol).max(axis=1) + np.abs(bnd).max(axis=(1, 2))
    floor = SCALE_FLOOR * max(mags.max(initial=0.0), np.finfo(float).tiny)
    return np.abs(total).max(axis=1) / np.maximum(mags, floor)


def local_tensor(geom_one, quad_one, R_K, edge_data_K) -> ElementTensors:
    """Single-element convenience wrapper (arrays with a leading axis of 1)."""
    return local_tensors(geom_one, quad_one, R_K, edge_data_K)


def evaluate_tensor(geom, coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sigma at points x (m, n, 2) -> (m, n, 2, 2), entry [.., i, d]."""
    phi = monomials(scaled_coords(geom, x), 2)
    c = coef.reshape(coef.shape[0], 2, 2, 6)
    return np.einsum("mna,mida->mnid", phi, c)


def tensor_divergence(geom, coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    d1, d2 = _monomial_gradients(scaled_coords(geom, x))
    c = coef.reshape(coef.shape[0], 2, 2, 6)
    div = np.einsum("mna,mia->mni", d1, c[:, :, 0]) + np.einsum("mna,mia->mni", d2, c[:, :, 1])
    return div / geom.h[:, None, None]


# ---------------------------------------------------------------- indicators

def psi(sigma_norm, osc_norm, c_k, eps):
    return np.asarray(sigma_norm) / math.sqrt(eps) + np.asarray(c_k) * np.asarray(osc_norm)


def computable_indicators(psi_st, psi_ad, div_y, div_w, constants: ReliabilityConstants):
    """Guaranteed (eta_y, eta_p, eta_w, eta_q) per element."""
    if constants is None:
        raise MissingInfSupError("guaranteed indicators need reliability constants")
    cis2 = constants.c_is ** 2
    cct2 = constants.c_ct ** 2

    def pair(ps, dv):
        ps2 = np.asarray(ps) ** 2
        dv2 = np.asarray(dv) ** 2
        ey = np.sqrt(3 * ps2 + cis2 * (1 + 2 * cct2) * dv2)
        ep = np.sqrt(2 * cis2 * ((1 + 3 * cct2) * ps2 + cis2 * cct2 * (1 + 2 * cct2) * dv2))
        return ey, ep

    eta_y, eta_p = pair(psi_st, div_y)
    eta_w, eta_q = pair(psi_ad, div_w)
    return eta_y, eta_p, eta_w, eta_q


# ---------------------------------------------------------------- driver

@dataclass(frozen=True)
class Certification:
    moment_residual: float
    sigma_residual: float
    compatibility: float
    identity_defect: float
    checked_elements: int

    @property
    def passed(self) -> bool:
        return max(self.moment_residual, self.sigma_residual, self.identity_defect) <= CERT_TOL

    def report(self) -> str:
        return (
            "certification\n"
            f"max moment residual      {self.moment_residual:.3e}\n"
            f"max sigma residual       {self.sigma_residual:.3e}\n"
            f"max compatibility defect {self.compatibility:.3e}\n"
            f"max identity defect      {self.identity_defect:.3e} ({self.checked_elements} elements)\n"
            f"status                   {'ok' if self.passed else 'FAILED'}\n"
        )


@dataclass(frozen=True)
class EquilibratedEstimate:
    flux_st: EdgeFluxSet
    flux_ad: EdgeFluxSet
    tensor_st: ElementTensors
    tensor_ad: ElementTensors
    psi_st: np.ndarray
    psi_ad: np.ndarray
    edge_data_st: np.ndarray
    edge_data_ad: np.ndarray
    certification: Certification


def edge_data(flux: EdgeFluxSet, trace: np.ndarray) -> np.ndarray:
    """g_{gamma,K} + R_{gamma,K} at each local edge's endpoints, (m, 3, 2, 2)."""
    return flux.element_values() + trace[:, :, None, :]


def _monomial_gradients(xi: np.ndarray):
    """Derivatives of the six quadratic monomials with respect to xi1 and xi2."""
    one = np.ones_like(xi[..., 0])
    zero = np.zeros_like(one)
    d1 = np.stack([zero, one, zero, 2 * xi[..., 0], xi[..., 1], zero], axis=-1)
    d2 = np.stack([zero, zero, one, zero, xi[..., 0], 2 * xi[..., 1]], axis=-1)
    return d1, d2


def sigma_identity_defect(geom, coef, R, data, elements, rng, n_fields: int = 1) -> float:
    """Relative defect of (sigma, grad xi)_K = (R, xi)_K + sum (g + R_gamma, xi)_gamma.

    Checked for random P2 vector fields xi on the given elements.
    """
    sub = geom.subset(elements)
    quad = ElementQuadrature.build(sub, 7)
    s_pts, s_w = line_rule(7)
    x = quad.points
    xi_q = scaled_coords(sub, x)
    phi = monomials(xi_q, 2)
    d1, d2 = _monomial_gradients(xi_q)
    sigma = evaluate_tensor(sub, coef[elements], x)
    r_q = eval_poly(R[elements], sub, x)
    worst = 0.0
    for _ in range(n_fields):
        field = rng.standard_normal((len(elements), 6, 2))
        grad = np.stack([np.einsum("mqa,mai->mqi", d1, field),
                         np.einsum("mqa,mai->mqi", d2, field)], axis=-1) / sub.h[:, None, None, None]
        lhs_terms = quad.weights[..., None, None] * sigma * grad
        vol_terms = quad.weights[..., None] * r_q * np.einsum("mqa,mai->mqi", phi, field)
        lhs = lhs_terms.sum(axis=(1, 2, 3))
        rhs = vol_terms.sum(axis=(1, 2))
        mags = np.abs(lhs_terms).sum(axis=(1, 2, 3)) + np.abs(vol_terms).sum(axis=(1, 2))
        for loc in range(3):
            P = sub.coords[:, EDGE_VERTICES[loc, 0]]
            Q = sub.coords[:, EDGE_VERTICES[loc, 1]]
            xs = P[:, None, :] + s_pts[None, :, None] * (Q - P)[:, None, :]
            f_s = np.einsum("msa,mai->msi", monomials(scaled_coords(sub, xs), 2), field)
            t0 = data[elements, loc, 0]
            t1 = data[elements, loc, 1]
            ts = (1 - s_pts)[None, :, None] * t0[:, None, :] + s_pts[None, :, None] * t1[:, None, :]
            terms = sub.lengths[:, loc, None, None] * s_w[None, :, None] * ts * f_s
            rhs = rhs + terms.sum(axis=(1, 2))
            mags = mags + np.abs(terms).sum(axis=(1, 2))
        floor = SCALE_FLOOR * max(mags.max(initial=0.0), np.finfo(float).tiny)
        worst = max(worst, float(np.max(np.abs(lhs - rhs) / np.maximum(mags, floor), initial=0.0)))
    return worst


def equilibrated_estimate(sol: OcpSolution, data: ResidualData, rng=None,
                          spot_checks: int = 20, strict: bool = True) -> EquilibratedEstimate:
    disc = sol.disc
    mesh = disc.mesh
    spec = disc.spec
    geom = disc.geom
    eq = FluxEquilibrator(mesh)
    flux_st = eq.solve(local_residual_functional(sol, "st"), data.trace_st)
    flux_ad = eq.solve(local_residual_functional(sol, "ad"), data.trace_ad)
    ed_st = edge_data(flux_st, data.trace_st)
    ed_ad = edge_data(flux_ad, data.trace_ad)
    ten_st = local_tensors(geom, disc.quad, data.R_st, ed_st)
    ten_ad = local_tensors(geom, disc.quad, data.R_ad, ed_ad)
    ck = c_element(geom.h, spec.eps, spec.kappa)
    psi_st = psi(ten_st.norm, data.osc_st, ck, spec.eps)
    psi_ad = psi(ten_ad.norm, data.osc_ad, ck, spec.eps)

    rng = np.random.default_rng(0) if rng is None else rng
    k = min(spot_checks, mesh.n_elements)
    elements = np.sort(rng.choice(mesh.n_elements, size=k, replace=False))
    defect = max(sigma_identity_defect(geom, ten_st.coef, data.R_st, ed_st, elements, rng),
                 sigma_identity_defect(geom, ten_ad.coef, data.R_ad, ed_ad, elements, rng))
    cert = Certification(
        moment_residual=max(flux_st.max_relative_moment_residual, flux_ad.max_relative_moment_residual),
        sigma_residual=float(max(ten_st.constraint_residual.max(initial=0.0),
                                 ten_ad.constraint_residual.max(initial=0.0))),
        compatibility=float(max(ten_st.compatibility.max(initial=0.0), ten_ad.compatibility.max(initial=0.0))),
        identity_defect=defect,
        checked_elements=k,
    )
    if strict and not cert.passed:
        raise CertificationError(cert.report())
    return EquilibratedEstimate(flux_st, flux_ad, ten_st, ten_ad, psi_st, psi_ad, ed_st, ed_ad, cert)
