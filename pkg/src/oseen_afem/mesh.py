"""Conforming triangulations with newest-vertex bisection.

Local conventions used throughout the package:

* triangles are stored counterclockwise;
* local edge ``i`` is the edge opposite local vertex ``i``, running from
  vertex ``i+1`` to vertex ``i+2`` (indices mod 3);
* ``ref_edge[K]`` is the local index of the refinement edge of ``K``;
* an edge's orientation for jumps is fixed by ``edge_tris[e, 0]``, the
  lower-indexed incident triangle.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidDomainError, RefinementError

DOMAINS = ("unit_square", "unit_triangle", "l_shape", "t_shape")

# local edge i -> (start, end) local vertices
EDGE_VERTICES = np.array([[1, 2], [2, 0], [0, 1]])


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    ref_edge: np.ndarray
    generation: np.ndarray = None
    parent: np.ndarray = None
    domain: str = ""

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        r = np.ascontiguousarray(self.ref_edge, dtype=np.int64).reshape(-1)
        g = (np.zeros(len(t), dtype=np.int64) if self.generation is None
             else np.asarray(self.generation, dtype=np.int64))
        for arr in (v, t, r, g):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "ref_edge", r)
        object.__setattr__(self, "generation", g)
        if len(r) != len(t) or len(g) != len(t):
            raise ValueError("per-triangle arrays must match the triangle count")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle references a missing vertex")
        if len(t) and np.any(signed_areas(v, t) <= 0):
            raise ValueError("triangles must be counterclockwise with positive area")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @cached_property
    def _edge_tables(self):
        t = self.triangles
        m = len(t)
        nv = max(self.n_vertices, 1)
        loc = t[:, EDGE_VERTICES]  # (m, 3, 2)
        lo = loc.min(axis=2).ravel()
        hi = loc.max(axis=2).ravel()
        keys = lo * nv + hi
        uniq, inverse = np.unique(keys, return_inverse=True)
        edges = np.column_stack([uniq // nv, uniq % nv])
        tri_edges = inverse.reshape(m, 3)
        tri_flat = np.repeat(np.arange(m), 3)
        order = np.lexsort((tri_flat, inverse))
        counts = np.bincount(inverse, minlength=len(uniq))
        if np.any(counts > 2):
            raise ValueError("an edge is shared by more than two triangles")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        edge_tris = -np.ones((len(uniq), 2), dtype=np.int64)
        edge_tris[:, 0] = tri_flat[order][starts]
        two = counts == 2
        edge_tris[two, 1] = tri_flat[order][starts[two] + 1]
        return edges, tri_edges, edge_tris

    @property
    def edges(self) -> np.ndarray:
        """Canonical (min, max) vertex pairs."""
        return self._edge_tables[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """Global edge index of each local edge, shape (n_elements, 3)."""
        return self._edge_tables[1]

    @property
    def edge_tris(self) -> np.ndarray:
        """Incident triangles per edge; second column is -1 on the boundary."""
        return self._edge_tables[2]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return self.edge_tris[:, 1] < 0

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    @cached_property
    def interior_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_vertices)

    @cached_property
    def geometry(self) -> "MeshGeometry":
        return MeshGeometry.from_mesh(self)

    @property
    def area(self) -> float:
        return float(self.geometry.area.sum())

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


@dataclass(frozen=True)
class ElementGeometry:
    h: float
    area: float
    normals: np.ndarray
    lengths: np.ndarray


@dataclass(frozen=True, eq=False)
class MeshGeometry:
    """Batched element geometry, arrays indexed by triangle."""

    coords: np.ndarray      # (m, 3, 2)
    area: np.ndarray        # (m,)
    grad_bary: np.ndarray   # (m, 3, 2) gradients of the barycentric coordinates
    lengths: np.ndarray     # (m, 3) local edge lengths
    normals: np.ndarray     # (m, 3, 2) outward unit normals
    h: np.ndarray           # (m,) diameters
    centroid: np.ndarray    # (m, 2)

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "MeshGeometry":
        p = mesh.vertices[mesh.triangles]
        d = p[:, EDGE_VERTICES[:, 1]] - p[:, EDGE_VERTICES[:, 0]]
        lengths = np.linalg.norm(d, axis=2)
        area = signed_areas(mesh.vertices, mesh.triangles)
        out = np.stack([d[..., 1], -d[..., 0]], axis=2)
        normals = out / lengths[..., None]
        grad = np.stack([-d[..., 1], d[..., 0]], axis=2) / (2.0 * area[:, None, None])
        return cls(coords=p, area=area, grad_bary=grad, lengths=lengths,
                   normals=normals, h=lengths.max(axis=1), centroid=p.mean(axis=1))

    def element(self, k: int) -> ElementGeometry:
        return ElementGeometry(h=float(self.h[k]), area=float(self.area[k]),
                               normals=self.normals[k].copy(),
                               lengths=self.lengths[k].copy())

    def subset(self, elements) -> "MeshGeometry":
        return MeshGeometry(self.coords[elements], self.area[elements], self.grad_bary[elements],
                            self.lengths[elements], self.normals[elements], self.h[elements],
                            self.centroid[elements])

    def map_points(self, bary: np.ndarray) -> np.ndarray:
        """Physical coordinates of barycentric points, shape (m, nq, 2)."""
        return np.einsum("qj,mjd->mqd", bary, self.coords)


def geometry(mesh: Mesh, k: int) -> ElementGeometry:
    return mesh.geometry.element(k)


def _longest_edges(vertices, triangles):
    p = vertices[triangles]
    d = p[:, EDGE_VERTICES[:, 1]] - p[:, EDGE_VERTICES[:, 0]]
    return np.argmax(np.linalg.norm(d, axis=2), axis=1)


def _fan_squares(corners, size=1.0):
    """Split each axis-aligned square into four triangles around its center."""
    index = {}
    verts = []
    tris = []

    def vid(x, y):
        key = (round(x, 12), round(y, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(key)
        return index[key]

    for x0, y0 in corners:
        c = vid(x0 + size / 2, y0 + size / 2)
        ring = [vid(x0, y0), vid(x0 + size, y0), vid(x0 + size, y0 + size), vid(x0, y0 + size)]
        for i in range(4):
            tris.append((ring[i], ring[(i + 1) % 4], c))
    return np.array(verts, dtype=float), np.array(tris, dtype=np.int64)


def build_initial_mesh(domain: str) -> Mesh:
    if domain == "unit_square":
        v, t = _fan_squares([(0.0, 0.0)])
    elif domain == "unit_triangle":
        v = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]], dtype=float)
        t = np.array([[0, 3, 5], [3, 1, 4], [5, 4, 2], [3, 4, 5]])
    elif domain == "l_shape":
        v, t = _fan_squares([(-1.0, -1.0), (-1.0, 0.0), (0.0, 0.0)])
    elif domain == "t_shape":
        v, t = _fan_squares([(-1.5, 0.0), (-0.5, 0.0), (0.5, 0.0), (-0.5, -1.0), (-0.5, -2.0)])
    else:
        raise InvalidDomainError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    return Mesh(v, t, _longest_edges(v, t), domain=domain)


def refine_conforming(mesh: Mesh, marked) -> Mesh:
    """Newest-vertex bisection of the marked triangles plus conforming closure.

    The returned mesh carries ``parent`` (index of the ancestor triangle in
    ``mesh``) and incremented ``generation`` for bisected triangles.
    """
    marked = np.unique(np.asarray(list(marked) if isinstance(marked, (set, frozenset)) else marked,
                                  dtype=np.int64))
    m = mesh.n_elements
    if marked.size and (marked.min() < 0 or marked.max() >= m):
        raise IndexError("marked triangle index out of range")
    if marked.size == 0:
        return Mesh(mesh.vertices, mesh.triangles, mesh.ref_edge, mesh.generation,
                    np.arange(m), mesh.domain)

    tri_edges = mesh.tri_edges
    ref_global = tri_edges[np.arange(m), mesh.ref_edge]
    flagged = np.zeros(len(mesh.edges), dtype=bool)
    flagged[ref_global[marked]] = True
    # closure: a triangle with any flagged edge must also split its refinement edge
    for _ in range(len(mesh.edges) + 1):
        need = flagged[tri_edges].any(axis=1) & ~flagged[ref_global]
        if not need.any():
            break
        flagged[ref_global[need]] = True
    else:
        raise RefinementError("refinement closure did not terminate; refinement edges are corrupt")

    split = np.flatnonzero(flagged)
    nv = mesh.n_vertices
    ends = mesh.edges[split]
    new_vertices = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[ends[:, 0]] + mesh.vertices[ends[:, 1]])])
    big = len(new_vertices)
    split_keys = ends[:, 0] * big + ends[:, 1]
    order = np.argsort(split_keys)
    split_keys = split_keys[order]
    split_mid = (nv + np.arange(len(split)))[order]

    def midpoint_of(p, q):
        keys = np.minimum(p, q) * big + np.maximum(p, q)
        pos = np.searchsorted(split_keys, keys)
        pos = np.minimum(pos, len(split_keys) - 1)
        hit = split_keys[pos] == keys
        return np.where(hit, split_mid[pos], -1)

    tris = mesh.triangles.copy()
    ref = mesh.ref_edge.copy()
    gen = mesh.generation.copy()
    parent = np.arange(m)
    # each pass bisects every triangle whose refinement edge is flagged; two passes suffice
    for _ in range(3):
        rows = np.arange(len(tris))
        a = tris[rows, ref]
        b = tris[rows, (ref + 1) % 3]
        c = tris[rows, (ref + 2) % 3]
        mid = midpoint_of(b, c)
        cut = mid >= 0
        if not cut.any():
            break
        keep = ~cut
        child1 = np.column_stack([a[cut], b[cut], mid[cut]])
        child2 = np.column_stack([a[cut], mid[cut], c[cut]])
        tris = np.vstack([tris[keep], child1, child2])
        ref = np.concatenate([ref[keep], np.full(cut.sum(), 2), np.full(cut.sum(), 1)])
        gen = np.concatenate([gen[keep], gen[cut] + 1, gen[cut] + 1])
        parent = np.concatenate([parent[keep], parent[cut], parent[cut]])
    else:
        raise RefinementError("bisection did not terminate")

    order = np.lexsort((np.arange(len(tris)), parent))
    return Mesh(new_vertices, tris[order], ref[order], gen[order], parent[order], mesh.domain)


def hanging_vertices(mesh: Mesh, tol: float = 1e-12) -> np.ndarray:
    """Vertices lying strictly inside an edge that has only one triangle."""
    edges = mesh.edges[mesh.boundary_edges]
    if len(edges) == 0:
        return np.zeros(0, dtype=np.int64)
    p = mesh.vertices[edges[:, 0]]
    q = mesh.vertices[edges[:, 1]]
    d = q - p
    found = []
    for start in range(0, mesh.n_vertices, 2048):
        x = mesh.vertices[start:start + 2048]
        rel = x[None, :, :] - p[:, None, :]
        L2 = np.einsum("ed,ed->e", d, d)[:, None]
        s = np.einsum("evd,ed->ev", rel, d) / L2
        cross = rel[..., 0] * d[:, None, 1] - rel[..., 1] * d[:, None, 0]
        on = (np.abs(cross) <= tol * L2) & (s > tol) & (s < 1 - tol)
        found.append(start + np.flatnonzero(on.any(axis=0)))
    return np.concatenate(found)


def is_conforming(mesh: Mesh) -> bool:
    try:
        edge_tris = mesh.edge_tris
    except ValueError:
        return False
    t = mesh.triangles
    # shared edges must be traversed in opposite directions by their two triangles
    inner = np.flatnonzero(edge_tris[:, 1] >= 0)
    k0, k1 = edge_tris[inner, 0], edge_tris[inner, 1]
    loc0 = np.argmax(mesh.tri_edges[k0] == inner[:, None], axis=1)
    loc1 = np.argmax(mesh.tri_edges[k1] == inner[:, None], axis=1)
    s0 = t[k0, EDGE_VERTICES[loc0, 0]]
    s1 = t[k1, EDGE_VERTICES[loc1, 0]]
    if np.any(s0 == s1):
        return False
    return len(hanging_vertices(mesh)) == 0


def normalized_angles(coords: np.ndarray, decimals: int = 9) -> np.ndarray:
    """Sorted interior angles of each triangle in ``coords`` (m, 3, 2)."""
    a = coords[:, EDGE_VERTICES[:, 1]] - coords[:, EDGE_VERTICES[:, 0]]
    lens = np.linalg.norm(a, axis=2)
    angles = np.empty(lens.shape)
    for i in range(3):
        opp = lens[:, i]
        s1, s2 = lens[:, (i + 1) % 3], lens[:, (i + 2) % 3]
        cosv = (s1 ** 2 + s2 ** 2 - opp ** 2) / (2 * s1 * s2)
        angles[:, i] = np.arccos(np.clip(cosv, -1.0, 1.0))
    return np.round(np.sort(angles, axis=1), decimals)


def similarity_classes(mesh: Mesh, decimals: int = 9) -> set:
    return {tuple(row) for row in normalized_angles(mesh.geometry.coords, decimals)}


def dump_mesh(mesh: Mesh) -> str:
    lines = ["mesh 2"]
    lines += [f"v {x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines += [f"t {i} {j} {k} {r}" for (i, j, k), r in zip(mesh.triangles, mesh.ref_edge)]
    lines += [f"b {i} {j}" for i, j in mesh.edges[mesh.boundary_edges]]
    return "\n".join(lines) + "\n"


def load_mesh(text: str, domain: str = "") -> Mesh:
    verts, tris, refs = [], [], []
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != ["mesh", "2"]:
        raise ValueError("mesh dump must start with 'mesh 2'")
    for parts in lines[1:]:
        if parts[0] == "v":
            verts.append((float(parts[1]), float(parts[2])))
        elif parts[0] == "t":
            tris.append(tuple(int(p) for p in parts[1:4]))
            refs.append(int(parts[4]))
        elif parts[0] != "b":
            raise ValueError(f"unrecognized mesh line: {' '.join(parts)}")
    return Mesh(np.array(verts), np.array(tris), np.array(refs), domain=domain)
