"""Triangulations of polygonal domains: entity tables, generators, refinement, I/O.

Local numbering convention used throughout the package: local edge ``k`` of a
triangle is the edge opposite local vertex ``k``.  Edges carry the canonical
orientation (smaller vertex index, larger vertex index).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Invalid mesh data or violated mesh assumption."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


class Mesh:
    """Immutable conforming triangulation with derived entity tables.

    Parameters
    ----------
    vertices : (nv, 2) array_like
    triangles : (nt, 3) array_like of int
        Clockwise triangles are reordered to positive orientation.
    check_connectivity : bool
        Enforce that every boundary vertex is joined by an edge to at least
        one interior vertex.
    """

    def __init__(self, vertices, triangles, check_connectivity: bool = True):
        vertices = np.array(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError("triangles must have shape (nt, 3)")
        nv = len(vertices)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= nv):
            raise MeshError("triangle vertex index out of range")

        area = signed_areas(vertices, triangles)
        if np.any(area == 0.0) or np.any(~np.isfinite(area)):
            bad = int(np.flatnonzero(~(np.abs(area) > 0))[0])
            raise MeshError(f"triangle {bad} has zero area")
        flip = area < 0
        triangles[flip] = triangles[flip][:, [0, 2, 1]]

        self.vertices = _readonly(vertices)
        self.triangles = _readonly(triangles)
        self._build_edges()
        self._validate(check_connectivity)

    # -- construction -------------------------------------------------------

    def _build_edges(self) -> None:
        t = self.triangles
        nt = len(t)
        # local edge k is opposite local vertex k
        local = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(
            pairs, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            raise MeshError("an edge is shared by more than two triangles")
        edge_of_triangle = inverse.reshape(nt, 3)

        tri_of_edge = np.full((len(edges), 2), -1, dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        slot = np.zeros(len(edges), dtype=np.int64)
        for flat in order:
            e = inverse[flat]
            tri_of_edge[e, slot[e]] = flat // 3
            slot[e] += 1

        boundary_edge = tri_of_edge[:, 1] < 0
        boundary_vertex = np.zeros(len(self.vertices), dtype=bool)
        boundary_vertex[edges[boundary_edge].ravel()] = True

        self.edges = _readonly(edges.astype(np.int64))
        self.edge_of_triangle = _readonly(edge_of_triangle.astype(np.int64))
        self.triangles_of_edge = _readonly(tri_of_edge)
        self.boundary_edge = _readonly(boundary_edge)
        self.boundary_vertex = _readonly(boundary_vertex)

    def _validate(self, check_connectivity: bool) -> None:
        used = np.zeros(self.nv, dtype=bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            raise MeshError(f"vertex {int(np.flatnonzero(~used)[0])} belongs to no triangle")
        euler = self.nv - self.ne + self.nt
        if euler != 1:
            raise MeshError(f"Euler characteristic is {euler}, expected 1 (simply connected)")
        if check_connectivity:
            bad = unconnected_boundary_vertices(self)
            if len(bad):
                raise MeshError(
                    f"boundary vertex {int(bad[0])} is not connected to any interior vertex"
                )

    # -- sizes and entity sets ---------------------------------------------

    @property
    def nv(self) -> int:
        return len(self.vertices)

    @property
    def nt(self) -> int:
        return len(self.triangles)

    @property
    def ne(self) -> int:
        return len(self.edges)

    @property
    def interior_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_vertex)

    @property
    def boundary_vertices(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_vertex)

    @property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_edge)

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_edge)

    # -- geometry -----------------------------------------------------------

    @property
    def areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.triangles)

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @property
    def diameters(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        lengths = np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)
        return lengths.max(axis=1)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    def vertex_patches(self) -> list[np.ndarray]:
        """Triangles incident to each vertex, in increasing triangle index."""
        tri = np.repeat(np.arange(self.nt), 3)
        ver = self.triangles.ravel()
        order = np.lexsort((tri, ver))
        split = np.searchsorted(ver[order], np.arange(1, self.nv))
        return np.split(tri[order], split)

    def locate(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Index of a triangle containing each point, -1 if outside."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        out = np.full(len(points), -1, dtype=np.int64)
        for i, x in enumerate(points):
            r = x - p[:, 0]
            l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
            l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
            inside = (l1 >= -tol) & (l2 >= -tol) & (l1 + l2 <= 1 + tol)
            hit = np.flatnonzero(inside)
            if len(hit):
                out[i] = hit[0]
        return out

    def __repr__(self) -> str:
        return f"Mesh(nv={self.nv}, nt={self.nt}, ne={self.ne})"


def unconnected_boundary_vertices(mesh: Mesh) -> np.ndarray:
    """Boundary vertices with no edge to an interior vertex."""
    a, b = mesh.edges[:, 0], mesh.edges[:, 1]
    bv = mesh.boundary_vertex
    ok = np.zeros(mesh.nv, dtype=bool)
    ok[a[~bv[b]]] = True
    ok[b[~bv[a]]] = True
    return np.flatnonzero(bv & ~ok)


@dataclass(frozen=True)
class EntityTables:
    interior_vertices: np.ndarray
    boundary_vertices: np.ndarray
    interior_edges: np.ndarray
    boundary_edges: np.ndarray


def classify_entities(mesh: Mesh) -> EntityTables:
    return EntityTables(
        interior_vertices=mesh.interior_vertices,
        boundary_vertices=mesh.boundary_vertices,
        interior_edges=mesh.interior_edges,
        boundary_edges=mesh.boundary_edges,
    )


# -- generators -------------------------------------------------------------

PATTERNS = ("crisscross", "alternating")


def generate_structured(n: int, pattern: str = "crisscross") -> Mesh:
    """Structured mesh of the unit square with ``n`` x ``n`` cells.

    ``crisscross`` cuts every square into four triangles through its centre;
    ``alternating`` cuts every square into two triangles, the diagonal
    direction alternating checkerboard-wise.  The alternating pattern only
    satisfies the boundary connectivity assumption for even ``n``; other
    sizes raise :class:`MeshError`.
    """
    if int(n) != n or n < 1:
        raise MeshError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    if pattern not in PATTERNS:
        raise MeshError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    s = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(s, s, indexing="xy")
    grid = np.column_stack([X.ravel(), Y.ravel()])

    def g(i, j):
        return j * (n + 1) + i

    tris = []
    if pattern == "crisscross":
        centres = []
        for j in range(n):
            for i in range(n):
                c = len(grid) + len(centres)
                centres.append(((s[i] + s[i + 1]) / 2, (s[j] + s[j + 1]) / 2))
                a, b, d, e = g(i, j), g(i + 1, j), g(i + 1, j + 1), g(i, j + 1)
                tris += [(a, b, c), (b, d, c), (d, e, c), (e, a, c)]
        vertices = np.vstack([grid, np.array(centres)])
    else:
        for j in range(n):
            for i in range(n):
                a, b, d, e = g(i, j), g(i + 1, j), g(i + 1, j + 1), g(i, j + 1)
                if (i + j) % 2 == 0:
                    tris += [(a, b, d), (a, d, e)]
                else:
                    tris += [(a, b, e), (b, d, e)]
        vertices = grid
    return Mesh(vertices, np.array(tris))


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four congruent children via edge midpoints."""
    mid = mesh.vertices[mesh.edges].mean(axis=1)
    vertices = np.vstack([mesh.vertices, mid])
    m = mesh.nv + mesh.edge_of_triangle  # midpoint of edge opposite local vertex k
    a, b, c = mesh.triangles.T
    ma, mb, mc = m.T  # ma opposite a, i.e. midpoint of bc
    children = np.concatenate(
        [
            np.column_stack([a, mc, mb]),
            np.column_stack([mc, b, ma]),
            np.column_stack([mb, ma, c]),
            np.column_stack([ma, mb, mc]),
        ]
    )
    # keep children of one parent adjacent: parent t -> rows 4t..4t+3
    nt = mesh.nt
    order = np.arange(4 * nt).reshape(4, nt).T.ravel()
    return Mesh(vertices, children[order])


def mesh_from_spec(spec: str) -> Mesh:
    """Parse ``crisscross:N``, ``alternating:N`` or ``file:PATH``."""
    kind, _, arg = spec.partition(":")
    if not arg:
        raise MeshError(f"mesh spec {spec!r} must look like KIND:ARG")
    if kind == "file":
        return load_mesh(arg)
    try:
        n = int(arg)
    except ValueError as exc:
        raise MeshError(f"mesh size {arg!r} is not an integer") from exc
    return generate_structured(n, kind)


# -- text format ------------------------------------------------------------

def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"{mesh.nv} {mesh.nt}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path, check_connectivity: bool = True) -> Mesh:
    """Read the plain-text mesh format; errors carry 1-based line numbers."""
    raw = Path(path).read_text().splitlines()
    if not raw:
        raise MeshError("line 1: empty file, expected header 'nv nt'")
    head = raw[0].split()
    try:
        nv, nt = (int(w) for w in head)
    except ValueError:
        raise MeshError(f"line 1: malformed header {raw[0]!r}, expected 'nv nt'") from None
    if nv < 3 or nt < 1:
        raise MeshError(f"line 1: malformed header {raw[0]!r}, expected positive counts")
    if len(raw) < 1 + nv + nt:
        raise MeshError(f"line {len(raw) + 1}: unexpected end of file")

    vertices = np.empty((nv, 2))
    for i in range(nv):
        lineno = 2 + i
        words = raw[lineno - 1].split()
        try:
            if len(words) != 2:
                raise ValueError
            vertices[i] = [float(w) for w in words]
        except ValueError:
            raise MeshError(f"line {lineno}: expected 'x y', got {raw[lineno - 1]!r}") from None

    triangles = np.empty((nt, 3), dtype=np.int64)
    for k in range(nt):
        lineno = 2 + nv + k
        words = raw[lineno - 1].split()
        try:
            if len(words) != 3:
                raise ValueError
            idx = [int(w) for w in words]
        except ValueError:
            raise MeshError(f"line {lineno}: expected 'i j k', got {raw[lineno - 1]!r}") from None
        if min(idx) < 0 or max(idx) >= nv:
            raise MeshError(f"line {lineno}: index out of range (nv={nv})")
        if signed_areas(vertices, np.array([idx]))[0] == 0.0:
            raise MeshError(f"line {lineno}: nonpositive triangle area")
        triangles[k] = idx
    for extra in range(1 + nv + nt, len(raw)):
        if raw[extra].strip():
            raise MeshError(f"line {extra + 1}: trailing data after triangles")
    return Mesh(vertices, triangles, check_connectivity=check_connectivity)
