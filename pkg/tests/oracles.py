"""Independent reference computations used by several test modules."""

import itertools

import numpy as np

from oseen_afem.fem import Discretization
from oseen_afem.mesh import Mesh, _longest_edges


def two_vertex_mesh() -> Mesh:
    """Unit square split into 6 triangles around two interior vertices."""
    v = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.35, 0.5], [0.65, 0.45]], dtype=float)
    a, b, c, d, p, q = range(6)
    t = np.array([[a, b, q], [b, c, q], [c, d, q], [d, p, q], [d, a, p], [a, q, p]])
    return Mesh(v, t, _longest_edges(v, t), domain="unit_square")


def _affine_map(fn, n_in, x0=None):
    """Columns of an affine map x -> fn(x) as (offset, matrix)."""
    base = fn(np.zeros(n_in) if x0 is None else x0)
    cols = [fn(np.eye(n_in)[j]) - base for j in range(n_in)]
    return base, np.array(cols).T


def active_set_oracle(mesh: Mesh, spec, chunk: int = 40000):
    """Solve the discrete optimality system by enumerating active sets.

    Every control component is lower-active, upper-active or free. For each
    pattern the coupled system is linear; the answer is the unique pattern
    whose solution satisfies the sign conditions. Saddle solves use dense
    LAPACK on the bordered matrices.
    """
    disc = Discretization(mesh, spec)
    ks = disc.state_matrix.toarray()
    ka = disc.adjoint_matrix.toarray()
    m = mesh.n_elements
    n_u = 2 * m

    def state(u_flat):
        return np.linalg.solve(ks, disc.gather_load(disc.state_local_load(u_flat.reshape(m, 2))))

    def adjoint(xs):
        y, _ = disc.unpack(xs)
        return np.linalg.solve(ka, disc.gather_load(disc.adjoint_local_load(y)))

    def mean_w(xa):
        w, _ = disc.unpack(xa)
        return w[mesh.triangles].mean(axis=1).ravel()

    def control_to_mean_w(u_flat):
        return mean_w(adjoint(state(u_flat)))

    m0, mat = _affine_map(control_to_mean_w, n_u)
    theta = spec.theta
    lo = np.tile(np.asarray(spec.lower, dtype=float), m)
    hi = np.tile(np.asarray(spec.upper, dtype=float), m)

    found = []
    patterns = itertools.product(range(3), repeat=n_u)
    while True:
        block = np.array(list(itertools.islice(patterns, chunk)), dtype=np.int8)
        if block.size == 0:
            break
        free = block == 0
        lhs = np.where(free[:, :, None], theta * np.eye(n_u)[None] + mat[None], np.eye(n_u)[None])
        rhs = np.where(free, -m0[None], np.where(block == 1, lo[None], hi[None]))
        u = np.linalg.solve(lhs, rhs[..., None])[..., 0]
        v = -(u @ mat.T + m0) / theta
        tol = 1e-10 * (1 + np.abs(v).max(axis=1, keepdims=True))
        ok_free = (u >= lo - tol) & (u <= hi + tol)
        ok_lower = v <= lo + tol
        ok_upper = v >= hi - tol
        good = np.where(free, ok_free, np.where(block == 1, ok_lower, ok_upper)).all(axis=1)
        found.extend(u[good])
    if not found:
        raise AssertionError("no consistent active set")
    u = np.array(found)
    if np.ptp(u, axis=0).max() > 1e-9 * (1 + np.abs(u).max()):
        raise AssertionError("active-set enumeration is not unique")
    u = u[0]
    xs = state(u)
    xa = adjoint(xs)
    y, p = disc.unpack(xs)
    w, q = disc.unpack(xa)
    return y, p, w, q, u.reshape(m, 2)


def simplex_monomial_integral(a: int, b: int) -> float:
    """Integral of x1^a x2^b over the unit right triangle: a! b! / (a+b+2)!."""
    from math import factorial
    return factorial(a) * factorial(b) / factorial(a + b + 2)


def central_difference(fn, x, h=1e-5):
    """Gradient of a vector field: entry [..., i, d] = d fn_i / d x_d."""
    x = np.asarray(x, dtype=float)
    cols = []
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_laplacian(fn, x, h=1e-3):
    x = np.asarray(x, dtype=float)
    out = -4 * fn(x)
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        out = out + fn(x + e) + fn(x - e)
    return out / h ** 2
