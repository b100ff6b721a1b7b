"""P1 velocity / P0 pressure discretization of the stabilized Oseen systems.

Velocity coefficients are stored as arrays of shape (n_vertices, 2); only
interior vertices carry unknowns. Local element vectors use the layout
(element, local vertex, component).
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DegenerateElementError, SolverFailure
from .mesh import Mesh, MeshGeometry
from .problem import ProblemSpec
from .quadrature import triangle_rule


# ---------------------------------------------------------------- polynomials

def monomial_exponents(degree: int) -> np.ndarray:
    return np.array([(d - j, j) for d in range(degree + 1) for j in range(d + 1)])


def scaled_coords(geom: MeshGeometry, x: np.ndarray) -> np.ndarray:
    """Local coordinates (x - centroid) / h for points x of shape (m, n, 2)."""
    return (x - geom.centroid[:, None, :]) / geom.h[:, None, None]


def monomials(xi: np.ndarray, degree: int) -> np.ndarray:
    """Scaled monomials evaluated at xi (..., 2) -> (..., nbasis)."""
    exps = monomial_exponents(degree)
    return xi[..., 0, None] ** exps[:, 0] * xi[..., 1, None] ** exps[:, 1]


@dataclass(frozen=True)
class ElementQuadrature:
    """Physical quadrature points and weights on every element."""

    points: np.ndarray   # (m, nq, 2)
    weights: np.ndarray  # (m, nq), summing to the element area
    bary: np.ndarray     # (nq, 3)

    @classmethod
    def build(cls, geom: MeshGeometry, degree: int = 7) -> "ElementQuadrature":
        rule = triangle_rule(degree)
        pts = geom.map_points(rule.bary)
        w = geom.area[:, None] * rule.normalized_weights[None, :]
        return cls(points=pts, weights=w, bary=rule.bary)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Elementwise integrals of values sampled at the points, (m, nq, ...)."""
        return np.einsum("mq,mq...->m...", self.weights, values)


def l2_project(values: np.ndarray, geom: MeshGeometry, quad: ElementQuadrature,
               degree: int) -> np.ndarray:
    """Elementwise L2 projection onto polynomials of the given degree.

    ``values`` are samples at the quadrature points, shape (m, nq, ncomp).
    Returns coefficients in the scaled monomial basis, shape (m, nbasis, ncomp).
    """
    phi = monomials(scaled_coords(geom, quad.points), degree)
    mass = np.einsum("mq,mqa,mqb->mab", quad.weights, phi, phi)
    load = np.einsum("mq,mqa,mqc->mac", quad.weights, phi, values)
    scale = geom.area[:, None, None]
    try:
        coef = np.linalg.solve(mass / scale, load / scale)
    except np.linalg.LinAlgError as exc:
        raise DegenerateElementError("singular local mass matrix") from exc
    return coef


def eval_poly(coef: np.ndarray, geom: MeshGeometry, x: np.ndarray) -> np.ndarray:
    """Evaluate elementwise polynomials (m, nbasis, ncomp) at points (m, n, 2)."""
    nb = coef.shape[1]
    degree = int(round((np.sqrt(8 * nb + 1) - 3) / 2))
    phi = monomials(scaled_coords(geom, x), degree)
    return np.einsum("mna,mac->mnc", phi, coef)


def p1_to_monomial(vertex_values: np.ndarray, geom: MeshGeometry) -> np.ndarray:
    """Coefficients of a P1 field given by vertex values (m, 3, ncomp)."""
    mean = vertex_values.mean(axis=1)
    grad = np.einsum("mjd,mjc->mdc", geom.grad_bary, vertex_values)
    return np.concatenate([mean[:, None, :], geom.h[:, None, None] * grad], axis=1)


# ---------------------------------------------------------------- discretization

class Discretization:
    """Element data and global matrices for one mesh and problem."""

    def __init__(self, mesh: Mesh, spec: ProblemSpec):
        self.mesh = mesh
        self.spec = spec
        self.geom = mesh.geometry
        self.quad = ElementQuadrature.build(self.geom, spec.quad_degree)
        g = self.geom
        lam = self.quad.bary
        W = self.quad.weights
        self.tau = spec.tau_k_scale * g.h ** 2
        self.cq = spec.convection_at(self.quad.points)
        # (c . grad) lambda_k at the quadrature points
        self.cg = np.einsum("mqd,mkd->mqk", self.cq, g.grad_bary)
        self.stiff = g.area[:, None, None] * np.einsum("mjd,mkd->mjk", g.grad_bary, g.grad_bary)
        self.mass = g.area[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
        # conv[j, k] = ((c . grad) phi_k, phi_j)
        self.conv = np.einsum("mq,qj,mqk->mjk", W, lam, self.cg)
        kap = spec.kappa
        tw = self.tau[:, None] * W
        self.supg_state = np.einsum("mq,mqk,mqj->mjk", tw, self.cg + kap * lam[None], self.cg)
        self.supg_adjoint = np.einsum("mq,mqk,mqj->mjk", tw, self.cg - kap * lam[None], self.cg)
        self.a_loc = spec.eps * self.stiff + kap * self.mass + self.conv
        self.c_loc = spec.eps * self.stiff + kap * self.mass - self.conv
        # (p_K, div(phi_j e_i)) = area * d_i lambda_j
        self.b_loc = g.area[:, None, None] * g.grad_bary
        self.test_state = lam[None] + self.tau[:, None, None] * self.cg
        self.test_adjoint = lam[None] - self.tau[:, None, None] * self.cg

        nv = mesh.n_vertices
        self.free_vertices = mesh.interior_vertices
        self.vertex_map = -np.ones(nv, dtype=np.int64)
        self.vertex_map[self.free_vertices] = np.arange(len(self.free_vertices))
        self.n_velocity = 2 * len(self.free_vertices)
        self.n_pressure = mesh.n_elements

    # -- data at quadrature points
    @cached_property
    def f_q(self) -> np.ndarray:
        return np.asarray(self.spec.f(self.quad.points), dtype=float)

    @cached_property
    def target_q(self) -> np.ndarray:
        return np.asarray(self.spec.y_target(self.quad.points), dtype=float)

    def velocity_at_quad(self, y: np.ndarray) -> np.ndarray:
        return np.einsum("qj,mji->mqi", self.quad.bary, y[self.mesh.triangles])

    def local_velocity(self, y: np.ndarray) -> np.ndarray:
        return y[self.mesh.triangles]

    # -- global assembly
    def _scatter_velocity(self, local: np.ndarray) -> sp.csr_matrix:
        t = self.mesh.triangles
        rows = self.vertex_map[t][:, :, None].repeat(3, axis=2)
        cols = self.vertex_map[t][:, None, :].repeat(3, axis=1)
        keep = (rows >= 0) & (cols >= 0)
        r, c, v = rows[keep], cols[keep], local[keep]
        n = self.n_velocity
        mat = sp.coo_matrix((np.concatenate([v, v]),
                             (np.concatenate([2 * r, 2 * r + 1]), np.concatenate([2 * c, 2 * c + 1]))),
                            shape=(n, n))
        return mat.tocsr()

    def velocity_block(self, local: np.ndarray) -> sp.csr_matrix:
        return self._scatter_velocity(local)

    @cached_property
    def divergence_matrix(self) -> sp.csr_matrix:
        """B[K, dof] = (chi_K, div phi_dof)."""
        t = self.mesh.triangles
        m = self.mesh.n_elements
        vm = self.vertex_map[t]
        rows, cols, vals = [], [], []
        for j in range(3):
            keep = vm[:, j] >= 0
            for i in range(2):
                rows.append(np.flatnonzero(keep))
                cols.append(2 * vm[keep, j] + i)
                vals.append(self.b_loc[keep, j, i])
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(m, self.n_velocity)).tocsr()

    @cached_property
    def jump_matrix(self) -> sp.csr_matrix:
        """H[K, K'] from tau_gamma * sum_gamma h_gamma ([p], [phi])_gamma."""
        mesh = self.mesh
        inner = ~mesh.boundary_edges
        k0, k1 = mesh.edge_tris[inner, 0], mesh.edge_tris[inner, 1]
        e = mesh.edges[inner]
        h = np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)
        w = self.spec.tau_gamma * h * h
        rows = np.concatenate([k0, k1, k0, k1])
        cols = np.concatenate([k0, k1, k1, k0])
        vals = np.concatenate([w, w, -w, -w])
        m = mesh.n_elements
        return sp.coo_matrix((vals, (rows, cols)), shape=(m, m)).tocsr()

    @cached_property
    def state_matrix(self) -> sp.csc_matrix:
        A = self.velocity_block(self.a_loc + self.supg_state)
        return self._saddle(A, -self.divergence_matrix.T, self.jump_matrix)

    @cached_property
    def adjoint_matrix(self) -> sp.csc_matrix:
        C = self.velocity_block(self.c_loc + self.supg_adjoint)
        return self._saddle(C, self.divergence_matrix.T, -self.jump_matrix)

    def _saddle(self, vel, grad, jump) -> sp.csc_matrix:
        area = self.geom.area[:, None]
        mean_col = sp.csr_matrix(area)
        return sp.bmat([[vel, grad, None],
                        [self.divergence_matrix, jump, mean_col],
                        [None, mean_col.T, None]], format="csc")

    # -- right-hand sides
    def state_local_load(self, u: np.ndarray) -> np.ndarray:
        """Local vectors (f + u, xi) + tau (f + u, (c.grad) xi), shape (m, 3, 2)."""
        data = self.f_q + u[:, None, :]
        return np.einsum("mq,mqj,mqi->mji", self.quad.weights, self.test_state, data)

    def adjoint_local_load(self, y: np.ndarray) -> np.ndarray:
        data = self.velocity_at_quad(y) - self.target_q
        return np.einsum("mq,mqj,mqi->mji", self.quad.weights, self.test_adjoint, data)

    def gather_load(self, local: np.ndarray) -> np.ndarray:
        vm = self.vertex_map[self.mesh.triangles]
        keep = vm >= 0
        out = np.zeros((len(self.free_vertices), 2))
        np.add.at(out, vm[keep], local[keep])
        rhs = np.zeros(self.state_matrix.shape[0])
        rhs[: self.n_velocity] = out.ravel()
        return rhs

    def unpack(self, x: np.ndarray):
        y = np.zeros((self.mesh.n_vertices, 2))
        y[self.free_vertices] = x[: self.n_velocity].reshape(-1, 2)
        p = x[self.n_velocity: self.n_velocity + self.n_pressure].copy()
        return y, p

    def pack(self, y: np.ndarray, p: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_velocity + self.n_pressure + 1)
        x[: self.n_velocity] = y[self.free_vertices].ravel()
        x[self.n_velocity: self.n_velocity + self.n_pressure] = p
        return x

    # -- local residual functionals, used by the flux equilibration
    def state_local_residual(self, u, y, p) -> np.ndarray:
        """l_K(phi_j e_i) for the state equation, shape (m, 3, 2)."""
        yl = self.local_velocity(y)
        op = np.einsum("mjk,mki->mji", self.a_loc + self.supg_state, yl)
        return self.state_local_load(u) - op + p[:, None, None] * self.b_loc

    def adjoint_local_residual(self, y, w, q) -> np.ndarray:
        wl = self.local_velocity(w)
        op = np.einsum("mjk,mki->mji", self.c_loc + self.supg_adjoint, wl)
        return self.adjoint_local_load(y) - op - q[:, None, None] * self.b_loc


@dataclass
class SaddleSystem:
    matrix: sp.csc_matrix
    rhs: np.ndarray
    disc: Discretization
    kind: str

    @property
    def shape(self):
        return self.matrix.shape


def assemble_forms(mesh: Mesh, spec: ProblemSpec) -> dict:
    """Global matrices of the convection-diffusion-reaction forms and of B.

    Rows and columns of the velocity forms range over interior-vertex dofs.
    """
    disc = Discretization(mesh, spec)
    return {
        "A": disc.velocity_block(disc.a_loc),
        "C": disc.velocity_block(disc.c_loc),
        "B": disc.divergence_matrix,
        "mass": disc.velocity_block(disc.mass),
        "stiffness": disc.velocity_block(disc.stiff),
        "disc": disc,
    }


def assemble_state(mesh: Mesh, spec: ProblemSpec, u: np.ndarray, disc: Discretization = None) -> SaddleSystem:
    disc = disc or Discretization(mesh, spec)
    rhs = disc.gather_load(disc.state_local_load(np.asarray(u, dtype=float)))
    return SaddleSystem(disc.state_matrix, rhs, disc, "state")


def assemble_adjoint(mesh: Mesh, spec: ProblemSpec, y: np.ndarray, disc: Discretization = None) -> SaddleSystem:
    disc = disc or Discretization(mesh, spec)
    rhs = disc.gather_load(disc.adjoint_local_load(np.asarray(y, dtype=float)))
    return SaddleSystem(disc.adjoint_matrix, rhs, disc, "adjoint")


class SaddleSolver:
    """Sparse LU of a bordered saddle matrix, reused across right-hand sides.

    The last row and column carry the pressure-mean constraint. The inner
    block is singular (constant pressures), so it is regularized by a
    positive entry on its last diagonal and the border is eliminated exactly
    through a two-by-two capacitance system. Rows with a negative diagonal
    are flipped first; the regularized block then has a positive definite
    symmetric part, which allows a symmetric fill-reducing ordering with
    diagonal pivots.
    """

    def __init__(self, matrix: sp.csc_matrix):
        self.matrix = matrix.tocsr()
        n = matrix.shape[0] - 1
        diag = self.matrix.diagonal()[:n]
        self.row_sign = np.where(diag < 0, -1.0, 1.0)
        inner = (sp.diags(self.row_sign) @ self.matrix[:n, :n]).tolil()
        pin = abs(diag[-1]) if diag[-1] != 0 else 1.0
        inner[n - 1, n - 1] += pin
        self.border_col = self.row_sign * self.matrix[:n, n].toarray().ravel()
        self.border_row = self.matrix[n, :n].toarray().ravel()
        try:
            self.lu = spla.splu(inner.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise SolverFailure(f"singular saddle-point factorization: {exc}") from exc
        unit = np.zeros(n)
        unit[-1] = 1.0
        self._pin = pin
        self._z_unit = self.lu.solve(unit)
        self._z_col = self.lu.solve(self.border_col)
        self._capacitance = np.array([
            [pin * self._z_unit[-1] - 1.0, -pin * self._z_col[-1]],
            [self.border_row @ self._z_unit, -(self.border_row @ self._z_col)],
        ])
        if not np.all(np.isfinite(self._capacitance)) or abs(np.linalg.det(self._capacitance)) < 1e-300:
            raise SolverFailure("saddle-point border is not invertible")

    def _apply_inverse(self, rhs: np.ndarray) -> np.ndarray:
        z = self.lu.solve(self.row_sign * rhs[:-1])
        g = np.array([-self._pin * z[-1], rhs[-1] - self.border_row @ z])
        shift, mult = np.linalg.solve(self._capacitance, g)
        return np.concatenate([z + shift * self._z_unit - mult * self._z_col, [mult]])

    def solve(self, rhs: np.ndarray, tol: float = 1e-10) -> np.ndarray:
        x = self._apply_inverse(rhs)
        bound = tol * (1.0 + np.linalg.norm(rhs))
        for _ in range(4):
            r = rhs - self.matrix @ x
            if np.linalg.norm(r) <= 1e-3 * bound:
                break
            x = x + self._apply_inverse(r)
        if not np.all(np.isfinite(x)) or np.linalg.norm(rhs - self.matrix @ x) > bound:
            raise SolverFailure("saddle-point solve missed the residual tolerance")
        return x


def solve_saddle(system: SaddleSystem):
    x = SaddleSolver(system.matrix).solve(system.rhs)
    return system.disc.unpack(x)


def dump_matrix(matrix) -> str:
    coo = sp.coo_matrix(matrix)
    return "".join(f"{i} {j} {v:.17g}\n" for i, j, v in zip(coo.row, coo.col, coo.data))
