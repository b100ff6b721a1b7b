import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oseen_afem.equilibration as eqmod
from oseen_afem.cases import case_library
from oseen_afem.constants import ReliabilityConstants
from oseen_afem.equilibration import (CERT_TOL, computable_indicators, edge_data, equilibrate,
                                      equilibrated_estimate, evaluate_tensor, local_residual_functional,
                                      local_tensors, psi, sigma_identity_defect, tensor_divergence)
from oseen_afem.errors import CertificationError, MissingInfSupError
from oseen_afem.fem import ElementQuadrature
from oseen_afem.mesh import EDGE_VERTICES, Mesh, build_initial_mesh, refine_conforming
from oseen_afem.ocp import solve_ocp
from oseen_afem.problem import ProblemSpec
from oseen_afem.residual import compute_residuals


def refined(domain, levels):
    mesh = build_initial_mesh(domain)
    for _ in range(levels):
        mesh = refine_conforming(mesh, np.arange(mesh.n_elements))
    return mesh


def bubble_solution(levels=4):
    case = case_library("bubble2d")
    sol = solve_ocp(refined(case.domain, levels), case.spec)
    return sol, compute_residuals(sol)


def test_fluxes_are_antisymmetric():
    sol, data = bubble_solution(3)
    flux = equilibrate(sol, data, "st")
    vals = flux.element_values()
    mesh = sol.mesh
    for e in np.flatnonzero(~mesh.boundary_edges):
        k0, k1 = mesh.edge_tris[e]
        l0 = int(np.flatnonzero(mesh.tri_edges[k0] == e)[0])
        l1 = int(np.flatnonzero(mesh.tri_edges[k1] == e)[0])
        # the neighbour walks the edge in the opposite direction
        assert np.allclose(vals[k0, l0], -vals[k1, l1][::-1], atol=1e-15)


@pytest.mark.parametrize("which", ["st", "ad"])
def test_flux_moments_balance_local_residuals(which):
    sol, data = bubble_solution(4)
    mesh = sol.mesh
    vals = equilibrate(sol, data, which).element_values()
    lengths = mesh.geometry.lengths
    moments = np.zeros((mesh.n_elements, 3, 2))
    for loc in range(3):
        a, b = EDGE_VERTICES[loc]
        g0, g1 = vals[:, loc, 0], vals[:, loc, 1]
        L = lengths[:, loc, None]
        # exact integrals of a linear function against the two hat functions
        moments[:, a] += L * (2 * g0 + g1) / 6
        moments[:, b] += L * (g0 + 2 * g1) / 6
    target = -local_residual_functional(sol, which)
    assert np.abs(moments - target).max() <= 1e-10 * np.abs(target).max()


def test_discrete_residual_vanishes_on_interior_hats():
    sol, _ = bubble_solution(4)
    mesh = sol.mesh
    for which in ("st", "ad"):
        local = local_residual_functional(sol, which)
        total = np.zeros((mesh.n_vertices, 2))
        np.add.at(total, mesh.triangles.ravel(), local.reshape(-1, 2))
        interior = ~mesh.boundary_vertices
        assert np.abs(total[interior]).max() <= 1e-10 * np.abs(local).max()


def test_zero_data_gives_zero_fluxes_and_tensors():
    mesh = refined("unit_square", 2)
    spec = ProblemSpec(eps=1.0, kappa=1.0)
    sol = solve_ocp(mesh, spec)
    assert np.abs(sol.y).max() == 0
    data = compute_residuals(sol)
    est = equilibrated_estimate(sol, data)
    assert np.abs(est.flux_st.values).max() == 0 and np.abs(est.flux_ad.values).max() == 0
    assert np.abs(est.tensor_st.coef).max() == 0 and np.abs(est.psi_ad).max() == 0
    assert est.certification.passed


def test_psi_arithmetic():
    assert math.isclose(psi(0.3, 2.0, 0.1, 1.0), 0.5)
    assert math.isclose(psi(0.3, 0.0, 0.1, 4.0), 0.15)
    assert np.allclose(psi(np.array([0.3, 0.0]), np.array([2.0, 1.0]), 0.1, 1.0), [0.5, 0.1])


def unit_constants(c_ct=1.0, c_is=1.0) -> ReliabilityConstants:
    return ReliabilityConstants(c_poincare=1.0, c_omega=1.0, c_ct=c_ct, c_is=c_is, beta=1.0, mu=1.0,
                                omega=1.0, d_y=1.0, d_w=1.0, d_u=1.0, rho=1.0)


def test_computable_indicator_combination():
    ey, ep, ew, eq = computable_indicators(np.array([1.0]), np.array([1.0]), np.zeros(1), np.zeros(1),
                                           unit_constants())
    assert np.allclose([ey[0], ew[0]], math.sqrt(3))
    assert np.allclose([ep[0], eq[0]], math.sqrt(8))
    ey, ep, _, _ = computable_indicators(np.zeros(1), np.zeros(1), np.ones(1), np.zeros(1),
                                         unit_constants())
    assert math.isclose(ey[0], math.sqrt(3)) and math.isclose(ep[0], math.sqrt(6))
    with pytest.raises(MissingInfSupError):
        computable_indicators(np.ones(1), np.ones(1), np.zeros(1), np.zeros(1), None)


# --- element tensors

def one_triangle(points):
    mesh = Mesh(np.asarray(points, dtype=float), np.array([[0, 1, 2]]), np.array([0]))
    geom = mesh.geometry
    return geom, ElementQuadrature.build(geom, 7)


def data_of_linear_tensor(geom, tau):
    """Residual (-div tau) and endpoint traces tau n of a P1 tensor given by its
    values at the vertices, tau[j, i, d]."""
    P = geom.coords[0]
    T = np.column_stack([P[1] - P[0], P[2] - P[0]])
    Tinv = np.linalg.inv(T)
    # gradient of each entry: d tau_id / d x_c
    grad = np.einsum("jid,jc->idc", tau[1:] - tau[0], Tinv)
    div = np.einsum("idd->i", grad)
    R = np.zeros((1, 3, 2))
    R[0, 0] = -div
    ed = np.zeros((1, 3, 2, 2))
    for loc in range(3):
        n = geom.normals[0, loc]
        for end in range(2):
            ed[0, loc, end] = tau[EDGE_VERTICES[loc, end]] @ n
    return R, ed


def tensor_l2(geom, quad, coef):
    vals = evaluate_tensor(geom, coef, quad.points)
    return math.sqrt(float(quad.integrate(np.sum(vals ** 2, axis=(-2, -1))).sum()))


triangles = st.tuples(st.floats(0.2, 2.0), st.floats(-1.0, 1.0), st.floats(0.2, 2.0))


@settings(max_examples=40, deadline=None)
@given(triangles, arrays(float, (3, 2, 2), elements=st.floats(-5, 5)))
def test_tensor_is_feasible_and_minimal(shape, tau):
    a, b, c = shape
    geom, quad = one_triangle([[0, 0], [a, 0], [b, c]])
    R, ed = data_of_linear_tensor(geom, tau)
    ten = local_tensors(geom, quad, R, ed)
    assert ten.constraint_residual[0] <= 1e-9
    x = quad.points
    assert np.allclose(-tensor_divergence(geom, ten.coef, x)[0], R[0, 0], atol=1e-9 * (1 + np.abs(tau).max()))
    # the given P1 tensor is feasible, so the minimum norm is at most its norm
    bary = quad.bary
    tau_q = np.einsum("qj,jid->qid", bary, tau)
    tau_norm = math.sqrt(float(quad.integrate(np.sum(tau_q ** 2, axis=(-2, -1))[None]).sum()))
    assert ten.norm[0] <= tau_norm * (1 + 1e-10) + 1e-12
    assert math.isclose(ten.norm[0], tensor_l2(geom, quad, ten.coef), rel_tol=1e-9, abs_tol=1e-12)


def test_tensor_traces_match_edge_data():
    geom, quad = one_triangle([[0, 0], [1, 0.2], [0.3, 0.9]])
    tau = np.random.default_rng(3).normal(size=(3, 2, 2))
    R, ed = data_of_linear_tensor(geom, tau)
    ten = local_tensors(geom, quad, R, ed)
    P = geom.coords[0]
    for loc in range(3):
        A, B = P[EDGE_VERTICES[loc]]
        s = np.linspace(0, 1, 5)
        pts = (A + s[:, None] * (B - A))[None]
        got = evaluate_tensor(geom, ten.coef, pts)[0] @ geom.normals[0, loc]
        want = (1 - s)[:, None] * ed[0, loc, 0] + s[:, None] * ed[0, loc, 1]
        assert np.allclose(got, want, atol=1e-10)


def test_zero_tensor_for_zero_data():
    geom, quad = one_triangle([[0, 0], [1, 0], [0, 1]])
    ten = local_tensors(geom, quad, np.zeros((1, 3, 2)), np.zeros((1, 3, 2, 2)))
    assert np.abs(ten.coef).max() == 0 and ten.norm[0] == 0


# --- certification

def test_identity_spot_checks_hold():
    sol, data = bubble_solution(4)
    est = equilibrated_estimate(sol, data, rng=np.random.default_rng(5), spot_checks=30)
    cert = est.certification
    assert cert.checked_elements == 30 and cert.passed
    assert cert.identity_defect <= CERT_TOL and cert.compatibility <= 1e-9
    assert "status                   ok" in cert.report()


def test_tampered_tensor_fails_certification(monkeypatch):
    sol, data = bubble_solution(3)
    real = eqmod.local_tensors

    def tampered(geom, quad, R, ed):
        ten = real(geom, quad, R, ed)
        coef = ten.coef.copy()
        coef[:, 0, 1] += 0.1 * np.abs(coef).max()
        return eqmod.ElementTensors(coef, ten.norm, ten.constraint_residual, ten.compatibility)

    monkeypatch.setattr(eqmod, "local_tensors", tampered)
    with pytest.raises(CertificationError, match="FAILED"):
        equilibrated_estimate(sol, data, spot_checks=sol.mesh.n_elements)
    est = equilibrated_estimate(sol, data, spot_checks=sol.mesh.n_elements, strict=False)
    assert not est.certification.passed


def test_tampered_edge_data_detected():
    sol, data = bubble_solution(3)
    est = equilibrated_estimate(sol, data)
    geom = sol.mesh.geometry
    elements = np.arange(sol.mesh.n_elements)
    bad = est.edge_data_st.copy()
    bad[:, 0] *= 1.5
    rng = np.random.default_rng(0)
    assert sigma_identity_defect(geom, est.tensor_st.coef, data.R_st, bad, elements, rng) > 1e-3
    ok = sigma_identity_defect(geom, est.tensor_st.coef, data.R_st, est.edge_data_st, elements, rng)
    assert ok <= CERT_TOL


@settings(max_examples=8, deadline=None)
@given(st.floats(0.1, 10.0))
def test_psi_is_homogeneous_in_the_data(lam):
    case = case_library("bubble2d")
    mesh = refined(case.domain, 3)
    spec = case.spec
    scaled = spec.with_(f=lambda x: lam * spec.f(x), y_target=lambda x: lam * spec.y_target(x),
                        lower=tuple(lam * np.asarray(spec.lower)), upper=tuple(lam * np.asarray(spec.upper)))
    out = []
    for s in (spec, scaled):
        sol = solve_ocp(mesh, s)
        est = equilibrated_estimate(sol, compute_residuals(sol))
        out.append((est.psi_st, est.psi_ad))
    for a, b in zip(out[0], out[1]):
        assert np.allclose(b, lam * a, rtol=1e-8, atol=1e-12 * lam * np.abs(a).max())


def test_edge_data_adds_traces():
    sol, data = bubble_solution(2)
    flux = equilibrate(sol, data, "ad")
    ed = edge_data(flux, data.trace_ad)
    assert np.allclose(ed - flux.element_values(), data.trace_ad[:, :, None, :])
    with pytest.raises(ValueError):
        local_residual_functional(sol, "xx")
