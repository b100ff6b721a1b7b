import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from oseen_afem.cases import case_library
from oseen_afem.constants import c_ct, c_omega, poincare_global
from oseen_afem.errors import SolverFailure
from oseen_afem.fem import (Discretization, ElementQuadrature, SaddleSolver, assemble_adjoint,
                            assemble_forms, assemble_state, dump_matrix, eval_poly, l2_project,
                            monomials, scaled_coords, solve_saddle)
from oseen_afem.mesh import Mesh, build_initial_mesh, refine_conforming
from oseen_afem.problem import ProblemSpec

from oracles import simplex_monomial_integral


def unit_right_triangle() -> Mesh:
    return Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]), np.array([0]))


def refined(domain, levels):
    mesh = build_initial_mesh(domain)
    for _ in range(levels):
        mesh = refine_conforming(mesh, np.arange(mesh.n_elements))
    return mesh


def stokes(**kw) -> ProblemSpec:
    return ProblemSpec(eps=1.0, kappa=0.0, **kw)


def test_projection_of_quadratic_to_constants():
    mesh = unit_right_triangle()
    quad = ElementQuadrature.build(mesh.geometry, 7)
    x = quad.points
    values = np.stack([x[..., 0] ** 2, np.zeros_like(x[..., 0])], axis=-1)
    coef = l2_project(values, mesh.geometry, quad, 0)
    assert math.isclose(coef[0, 0, 0], simplex_monomial_integral(2, 0) / 0.5, rel_tol=1e-13)
    assert coef[0, 0, 1] == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2), st.integers(0, 2 ** 31 - 1))
def test_projection_is_orthogonal_projector(degree, seed):
    mesh = refined("l_shape", 1)
    geom = mesh.geometry
    quad = ElementQuadrature.build(geom, 7)
    values = np.random.default_rng(seed).normal(size=quad.points.shape)
    coef = l2_project(values, geom, quad, degree)
    back = eval_poly(coef, geom, quad.points)
    assert np.allclose(l2_project(back, geom, quad, degree), coef, rtol=0, atol=1e-12)
    basis = monomials(scaled_coords(geom, quad.points), degree)
    inner = np.einsum("mq,mqb,mqi->mbi", quad.weights, basis, values - back)
    assert np.abs(inner).max() <= 1e-12 * np.abs(values).max()


def test_reference_stiffness_entries():
    disc = Discretization(unit_right_triangle(), stokes())
    expected = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    assert np.allclose(disc.stiff[0], expected, atol=1e-15)
    assert np.allclose(disc.mass[0], (np.ones((3, 3)) + np.eye(3)) / 24)


def test_adjoint_form_is_transpose():
    forms = assemble_forms(refined("unit_square", 4), case_library("bubble2d").spec)
    A, C = forms["A"], forms["C"]
    assert abs(A - C.T).max() <= 1e-14 * abs(A).max()
    assert abs(A - A.T).max() > 1e-3  # convection makes it nonsymmetric


def test_no_convection_gives_symmetric_forms():
    forms = assemble_forms(refined("l_shape", 2), ProblemSpec(eps=0.3, kappa=2.0))
    A, C = forms["A"], forms["C"]
    assert abs(A - A.T).max() <= 1e-15 and abs(A - C).max() == 0


def test_stabilization_vanishes_without_convection():
    disc = Discretization(refined("unit_square", 2), ProblemSpec(eps=1.0, kappa=3.0))
    assert np.all(disc.supg_state == 0) and np.all(disc.supg_adjoint == 0)


def test_divergence_of_interior_fields_has_zero_mean():
    disc = assemble_forms(refined("t_shape", 2), stokes())["disc"]
    B = disc.divergence_matrix
    assert np.abs(B.T @ np.ones(B.shape[0])).max() <= 1e-14


def test_continuity_bound_on_random_pairs():
    case = case_library("bubble2d")
    mesh = refined("unit_square", 3)
    forms = assemble_forms(mesh, case.spec)
    A, K, M = forms["A"], forms["stiffness"], forms["mass"]
    energy = case.spec.eps * K + case.spec.kappa * M
    c_om = c_omega(1.0, 1.0, poincare_global((1, 1)))
    bound = c_ct(1.0, c_om, math.sqrt(2))
    rng = np.random.default_rng(3)
    for _ in range(50):
        x, z = rng.normal(size=(2, A.shape[0]))
        assert abs(z @ (A @ x)) <= bound * math.sqrt(x @ energy @ x) * math.sqrt(z @ energy @ z)


def two_triangles() -> Mesh:
    v = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return Mesh(v, np.array([[0, 1, 2], [0, 2, 3]]), np.array([1, 0]))


def test_pressure_jump_block():
    disc = Discretization(two_triangles(), stokes())
    p = np.array([1.0, -1.0])
    h = math.sqrt(2)
    # tau_gamma * h_gamma * integral over the edge of [p][phi]
    assert math.isclose(p @ disc.jump_matrix @ p, h * h * 4)
    H = disc.jump_matrix.toarray()
    assert np.allclose(H, H.T)


def test_adjoint_pressure_block_is_negated_jump():
    disc = Discretization(refined("unit_square", 2), case_library("bubble2d").spec)
    n0, n1 = disc.n_velocity, disc.n_velocity + disc.n_pressure
    st_block = disc.state_matrix[n0:n1, n0:n1]
    ad_block = disc.adjoint_matrix[n0:n1, n0:n1]
    assert abs(st_block + ad_block).max() == 0
    assert abs(st_block - disc.jump_matrix).max() == 0


def test_zero_data_gives_zero_solution():
    mesh = refined("unit_square", 2)
    spec = stokes()
    y, p = solve_saddle(assemble_state(mesh, spec, np.zeros((mesh.n_elements, 2))))
    assert np.all(y == 0) and np.all(p == 0)
    w, q = solve_saddle(assemble_adjoint(mesh, spec, np.zeros((mesh.n_vertices, 2))))
    assert np.all(w == 0) and np.all(q == 0)


@pytest.mark.parametrize("name", ["bubble2d", "layer2d"])
def test_manufactured_discrete_round_trip(name):
    case = case_library(name)
    mesh = refined(case.domain, 4)
    disc = Discretization(mesh, case.spec)
    rng = np.random.default_rng(11)
    for matrix in (disc.state_matrix, disc.adjoint_matrix):
        y = np.zeros((mesh.n_vertices, 2))
        y[disc.free_vertices] = rng.normal(size=(len(disc.free_vertices), 2))
        p = rng.normal(size=mesh.n_elements)
        p -= p @ disc.geom.area / disc.geom.area.sum()
        x = disc.pack(y, p)
        rhs = matrix @ x
        got = SaddleSolver(matrix).solve(rhs)
        assert np.abs(got - x).max() <= 1e-10 * (1 + np.abs(x).max())


def test_solution_postconditions():
    case = case_library("bubble2d")
    mesh = refined(case.domain, 5)
    system = assemble_state(mesh, case.spec, np.full((mesh.n_elements, 2), 0.3))
    x = SaddleSolver(system.matrix).solve(system.rhs)
    assert np.linalg.norm(system.matrix @ x - system.rhs) <= 1e-10 * (1 + np.linalg.norm(system.rhs))
    y, p = system.disc.unpack(x)
    area = mesh.geometry.area
    assert abs(p @ area) <= 1e-12 * (np.abs(p) @ area)
    assert np.all(y[mesh.boundary_vertices] == 0)


def test_mesh_without_interior_vertex():
    mesh = build_initial_mesh("unit_triangle")
    y, p = solve_saddle(assemble_state(mesh, case_library("layer2d").spec, np.zeros((4, 2))))
    assert np.all(y == 0) and np.allclose(p, 0)


def test_singular_matrix_fails():
    bad = sp.csc_matrix(np.zeros((3, 3)))
    with pytest.raises(SolverFailure):
        SaddleSolver(bad)


def test_matrix_dump_format():
    text = dump_matrix(sp.csr_matrix(np.array([[0.0, 2.5], [1.0, 0.0]])))
    assert sorted(text.splitlines()) == ["0 1 2.5", "1 0 1"]
