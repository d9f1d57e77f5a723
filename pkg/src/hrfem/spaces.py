"""Global finite element spaces.

* :class:`KSSpace` - Kouhia-Stenberg displacements: conforming P1 hats in the
  first component, Crouzeix-Raviart functions in the second, clamped.
* :class:`StressBasis` - the nonconforming stress space dual to ``KSSpace``,
  with a locally supported basis built entity by entity.
* :class:`PiecewiseSpace` - discontinuous vector spaces (rigid motions,
  constants, the strain-minimal space, full P1) with local projections.
* :class:`ConstraintSet` - linear constraints cutting out the reduced stress
  and displacement spaces.

Stress fields are represented through a sparse matrix ``S`` of shape
``(6 nt, dim)`` mapping global coefficients to per-cell mode coefficients
(row ``6 t + r`` is mode ``r`` on cell ``t``).  KS fields are represented by
``P`` of shape ``(6 nt, dim)`` mapping global coefficients to the local KS
test coefficients of each cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.linalg import null_space

from .local_fe import (
    ASSEMBLY_DEGREE,
    DUAL_TOL,
    N_STRESS,
    Q_MODE,
    VECTOR_SPACES,
    VOIGT_WEIGHT,
    CellGeometry,
    dual_coefficients,
    ks_local_gradients,
    ks_local_values,
    pairing_matrices,
    stress_modes,
    sym_voigt,
    tensor_dot_grad,
    vector_mode_values,
)
from .mesh import Mesh
from .quadrature import quadrature

DENSE_LIMIT = 3000


class SpaceConstructionError(RuntimeError):
    pass


# -- Kouhia-Stenberg displacements -------------------------------------------

@dataclass(frozen=True)
class KSSpace:
    mesh: Mesh
    vertex_dofs: np.ndarray     # global vertex index per first-component dof
    edge_dofs: np.ndarray       # global edge index per second-component dof
    local_to_global: np.ndarray  # (nt, 6), -1 for clamped local functions

    @property
    def dim(self) -> int:
        return len(self.vertex_dofs) + len(self.edge_dofs)

    @cached_property
    def P(self) -> sp.csr_matrix:
        """Local KS test coefficients from global coefficients, (6 nt, dim)."""
        nt = self.mesh.nt
        rows = np.arange(6 * nt).reshape(nt, 6)
        mask = self.local_to_global >= 0
        return sp.csr_matrix(
            (np.ones(mask.sum()), (rows[mask], self.local_to_global[mask])),
            shape=(6 * nt, self.dim),
        )

    def local_coefficients(self, coeffs: np.ndarray) -> np.ndarray:
        return (self.P @ coeffs).reshape(self.mesh.nt, 6)


def build_ks_space(mesh: Mesh) -> KSSpace:
    iv = mesh.interior_vertices
    ie = mesh.interior_edges
    vmap = np.full(mesh.nv, -1, dtype=np.int64)
    vmap[iv] = np.arange(len(iv))
    emap = np.full(mesh.ne, -1, dtype=np.int64)
    emap[ie] = len(iv) + np.arange(len(ie))
    l2g = np.concatenate([vmap[mesh.triangles], emap[mesh.edge_of_triangle]], axis=1)
    return KSSpace(mesh, iv, ie, l2g)


def ks_to_p1_modes(geom: CellGeometry, local: np.ndarray) -> np.ndarray:
    """Convert local KS coefficients (nt, 6) to P1 mode coefficients (nt, 6)."""
    # value at the centroid: lambda_k = 1/3 there
    c1 = local[:, 0:3].sum(axis=1) / 3.0
    c2 = (local[:, 3:6] * (1.0 - 2.0 / 3.0)).sum(axis=1)
    g = np.einsum("nk,nkd->nd", local[:, 0:3], geom.grad_bary)
    h = -2.0 * np.einsum("nk,nkd->nd", local[:, 3:6], geom.grad_bary)
    return np.column_stack([c1, c2, g[:, 0], g[:, 1], h[:, 0], h[:, 1]])


# -- stress space ---------------------------------------------------------------

GROUP_BOUNDARY_VERTEX = 1
GROUP_INTERIOR_VERTEX = 2
GROUP_BOUNDARY_EDGE = 3
GROUP_INTERIOR_EDGE = 4


@dataclass(frozen=True)
class StressBasis:
    """Locally supported basis of the nonconforming stress space."""

    mesh: Mesh
    geom: CellGeometry
    pairing: np.ndarray   # (nt, 6, 6) local pairing matrices
    dual: np.ndarray      # (nt, 6, 6) dual coefficients, M^T C = I
    D: sp.csc_matrix      # (6 nt, dim) coefficients in the local dual bases
    S: sp.csc_matrix      # (6 nt, dim) coefficients in the local modes
    group: np.ndarray     # (dim,) owning group 1..4
    entity: np.ndarray    # (dim,) owning vertex or edge index
    method: str           # "analytic" or "nullspace"

    @property
    def dim(self) -> int:
        return self.S.shape[1]

    def function(self, j: int) -> list[tuple[int, np.ndarray]]:
        """Support of basis function ``j`` as (cell, 6 dual coefficients) pairs."""
        col = self.D[:, j]
        out: dict[int, np.ndarray] = {}
        for row, val in zip(col.indices, col.data):
            t, k = divmod(int(row), N_STRESS)
            out.setdefault(t, np.zeros(N_STRESS))[k] += val
        return sorted(out.items())

    @cached_property
    def cell_functions(self) -> list[np.ndarray]:
        """Global basis functions touching each cell."""
        csr = self.S.tocsr()
        nt = self.mesh.nt
        out = []
        for t in range(nt):
            lo, hi = csr.indptr[N_STRESS * t], csr.indptr[N_STRESS * (t + 1)]
            out.append(np.unique(csr.indices[lo:hi]))
        return out

    def mode_coefficients(self, coeffs: np.ndarray) -> np.ndarray:
        return (self.S @ coeffs).reshape(self.mesh.nt, N_STRESS)

    @cached_property
    def pairing_blocks(self) -> sp.csr_matrix:
        return sp.block_diag(list(self.pairing), format="csr")


def _cyclic_cells(mesh: Mesh, vertex: int, cells: np.ndarray) -> np.ndarray:
    d = mesh.centroids[cells] - mesh.vertices[vertex]
    return cells[np.argsort(np.arctan2(d[:, 1], d[:, 0]), kind="stable")]


def _entity_constraint(pairing, dual, cells, locals_) -> np.ndarray:
    """Pairing of each cell's entity dual with the global entity test function."""
    return np.array([dual[t, :, k] @ pairing[t, :, k] for t, k in zip(cells, locals_)])


def build_stress_space(mesh: Mesh, method: str = "auto") -> StressBasis:
    """Build the locally supported basis in four groups.

    Groups 1 and 3 are single-cell duals for boundary vertices and boundary
    edges.  Group 2 takes, around each interior vertex with cells ordered by
    angle, differences of the vertex duals on cyclically adjacent cells
    (dropping the last pair).  Group 4 is the difference of the two edge duals
    of an interior edge.  With ``method="nullspace"`` (or when the analytic
    coefficients fail the constraint check) interior entities instead use an
    SVD nullspace of their constraint row.
    """
    if method not in ("auto", "analytic", "nullspace"):
        raise ValueError(f"unknown method {method!r}")
    geom = CellGeometry.from_mesh(mesh)
    M = pairing_matrices(geom)
    C = dual_coefficients(geom, M)
    tri = mesh.triangles
    eot = mesh.edge_of_triangle

    rows: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    group: list[int] = []
    entity: list[int] = []
    used_fallback = False

    def add(r, v, g, e):
        rows.append(np.asarray(r, dtype=np.int64))
        vals.append(np.asarray(v, dtype=float))
        group.append(g)
        entity.append(e)

    def interior(cells, locals_, g, e):
        nonlocal used_fallback
        row = _entity_constraint(M, C, cells, locals_)
        dof_rows = N_STRESS * cells + locals_
        m = len(cells)
        analytic_ok = np.abs(row - 1.0).max() <= DUAL_TOL
        if method == "analytic" and not analytic_ok:
            raise SpaceConstructionError(
                f"entity {e} (group {g}): dual pairing residual {np.abs(row - 1).max():.2e}"
            )
        if method == "nullspace" or not analytic_ok:
            used_fallback = True
            basis = null_space(row[None, :], rcond=DUAL_TOL)
            # deterministic sign: first nonzero entry positive
            for j in range(basis.shape[1]):
                v = basis[:, j]
                if v[np.flatnonzero(np.abs(v) > DUAL_TOL)[0]] < 0:
                    v = -v
                nz = np.abs(v) > 1e-15
                add(dof_rows[nz], v[nz], g, e)
            return
        for i in range(m - 1):
            add(dof_rows[[i, i + 1]], [1.0, -1.0], g, e)

    vertex_cells = mesh.vertex_patches()
    local_vertex = {}
    for t in range(mesh.nt):
        for k in range(3):
            local_vertex[(t, int(tri[t, k]))] = k

    for a in mesh.boundary_vertices:
        for t in vertex_cells[a]:
            add([N_STRESS * t + local_vertex[(int(t), int(a))]], [1.0],
                GROUP_BOUNDARY_VERTEX, int(a))
    for a in mesh.interior_vertices:
        cells = _cyclic_cells(mesh, a, vertex_cells[a])
        locals_ = np.array([local_vertex[(int(t), int(a))] for t in cells])
        interior(cells, locals_, GROUP_INTERIOR_VERTEX, int(a))
    toe = mesh.triangles_of_edge
    for e in mesh.boundary_edges:
        t = int(toe[e, 0])
        k = int(np.flatnonzero(eot[t] == e)[0])
        add([N_STRESS * t + 3 + k], [1.0], GROUP_BOUNDARY_EDGE, int(e))
    for e in mesh.interior_edges:
        cells = np.sort(toe[e])
        locals_ = np.array([3 + int(np.flatnonzero(eot[t] == e)[0]) for t in cells])
        interior(cells, locals_, GROUP_INTERIOR_EDGE, int(e))

    n = len(group)
    counts = np.array([len(r) for r in rows])
    D = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.repeat(np.arange(n), counts))),
        shape=(N_STRESS * mesh.nt, n),
    )
    S = _dual_to_modes(C, D)
    basis = StressBasis(
        mesh, geom, M, C, D, S, np.array(group), np.array(entity),
        "nullspace" if used_fallback else "analytic",
    )
    expected = N_STRESS * mesh.nt - len(mesh.interior_edges) - len(mesh.interior_vertices)
    if basis.dim != expected:
        raise SpaceConstructionError(f"stress space has {basis.dim} functions, expected {expected}")
    R = adjoint_matrix(basis, build_ks_space(mesh))
    worst = float(np.abs(R.data).max()) if R.nnz else 0.0
    if worst > DUAL_TOL:
        j = int(R.tocoo().row[np.argmax(np.abs(R.tocoo().data))])
        raise SpaceConstructionError(
            f"adjoint identity violated by {worst:.2e} (group {basis.group[j]}, entity {basis.entity[j]})"
        )
    return basis


def _dual_to_modes(C: np.ndarray, D: sp.spmatrix) -> sp.csc_matrix:
    """``blockdiag(C_T) @ D`` assembled without forming the block matrix."""
    coo = D.tocoo()
    t, k = np.divmod(coo.row, N_STRESS)
    r = np.arange(N_STRESS)
    rows = (N_STRESS * t[:, None] + r[None, :]).ravel()
    cols = np.repeat(coo.col, N_STRESS)
    vals = (C[t, :, k] * coo.data[:, None]).ravel()
    S = sp.csc_matrix((vals, (rows, cols)), shape=D.shape)
    S.eliminate_zeros()
    return S


def adjoint_matrix(stress: StressBasis, ks: KSSpace) -> sp.csr_matrix:
    """``(div tau_i, v_j) + (tau_i, eps_h v_j)`` for all basis pairs, (dim S, dim KS)."""
    return (stress.S.T @ stress.pairing_blocks @ ks.P).tocsr()


# -- discontinuous vector spaces ------------------------------------------------

@dataclass(frozen=True)
class PiecewiseSpace:
    """Cell-wise linear vector fields spanned by a fixed list of modes."""

    mesh: Mesh
    geom: CellGeometry
    kind: str
    mass: np.ndarray   # (nt, k, k) local L2 mass matrices

    @property
    def nloc(self) -> int:
        return self.mass.shape[1]

    @property
    def dim(self) -> int:
        return self.mesh.nt * self.nloc

    def values(self, shifted: np.ndarray) -> np.ndarray:
        return vector_mode_values(VECTOR_SPACES[self.kind], shifted)

    def moments(self, f, degree: int = 10, params=None) -> np.ndarray:
        """``(f, phi_k)_T`` for every cell and local mode, shape (nt, k)."""
        rule = quadrature(degree)
        x = self.geom.physical(rule)
        fx = f(x) if params is None else f(x, params)
        phi = self.values(x - self.geom.centroid[:, None, :])
        return np.einsum("nq,nqd,nqkd->nk", self.geom.weights(rule), fx, phi)

    def project(self, f, degree: int = 10, params=None) -> np.ndarray:
        """Local L2 projection coefficients, shape (nt, k)."""
        return np.linalg.solve(self.mass, self.moments(f, degree, params)[..., None])[..., 0]

    def project_modes(self, kind: str, coeffs: np.ndarray) -> np.ndarray:
        """Project a field given in another piecewise space onto this one."""
        rule = quadrature(ASSEMBLY_DEGREE)
        x = self.geom.shifted(rule)
        w = self.geom.weights(rule)
        src = vector_mode_values(VECTOR_SPACES[kind], x)
        dst = self.values(x)
        rhs = np.einsum("nq,nqjd,nj,nqkd->nk", w, src, coeffs, dst)
        return np.linalg.solve(self.mass, rhs[..., None])[..., 0]

    def evaluate(self, coeffs: np.ndarray, cells: np.ndarray, points: np.ndarray) -> np.ndarray:
        shifted = points - self.geom.centroid[cells]
        phi = vector_mode_values(VECTOR_SPACES[self.kind], shifted)
        return np.einsum("mkd,mk->md", phi, coeffs[cells])


def build_piecewise_space(mesh: Mesh, kind: str, geom: CellGeometry | None = None) -> PiecewiseSpace:
    if kind not in VECTOR_SPACES:
        raise ValueError(f"unknown piecewise space {kind!r}")
    geom = geom or CellGeometry.from_mesh(mesh)
    rule = quadrature(ASSEMBLY_DEGREE)
    phi = vector_mode_values(VECTOR_SPACES[kind], geom.shifted(rule))
    mass = np.einsum("nq,nqkd,nqld->nkl", geom.weights(rule), phi, phi)
    return PiecewiseSpace(mesh, geom, kind, mass)


def build_rigid_space(mesh: Mesh, geom: CellGeometry | None = None) -> PiecewiseSpace:
    return build_piecewise_space(mesh, "rigid", geom)


def build_constant_space(mesh: Mesh, geom: CellGeometry | None = None) -> PiecewiseSpace:
    return build_piecewise_space(mesh, "p0", geom)


def mode_vector_pairing(geom: CellGeometry, kind: str) -> np.ndarray:
    """``(div tau_r, v_k)_T + (tau_r, eps v_k)_T`` for stress modes and vector modes, (nt, 6, k)."""
    space = VECTOR_SPACES[kind]
    rule = quadrature(ASSEMBLY_DEGREE)
    x = geom.shifted(rule)
    w = geom.weights(rule)
    val, div = stress_modes(x[..., 0], x[..., 1])
    v = vector_mode_values(space, x)
    div_term = np.einsum("nq,nqrd,nqkd->nrk", w, div, v)
    tau_int = np.einsum("nq,nqrc->nrc", w, val)
    grad_term = tensor_dot_grad(tau_int[:, :, None, :], space[1][None, None])
    return div_term + grad_term


def div_moment_matrices(geom: CellGeometry, kind: str) -> np.ndarray:
    """``(div tau_r, v_k)_T`` for stress modes and vector modes, (nt, k, 6)."""
    rule = quadrature(ASSEMBLY_DEGREE)
    x = geom.shifted(rule)
    _, div = stress_modes(x[..., 0], x[..., 1])
    v = vector_mode_values(VECTOR_SPACES[kind], x)
    return np.einsum("nq,nqrd,nqkd->nkr", geom.weights(rule), div, v)


def stress_mass_matrices(geom: CellGeometry) -> np.ndarray:
    """Frobenius L2 Gram matrices of the six stress modes, (nt, 6, 6)."""
    rule = quadrature(ASSEMBLY_DEGREE)
    x = geom.shifted(rule)
    val, _ = stress_modes(x[..., 0], x[..., 1])
    return np.einsum("nq,nqrc,c,nqsc->nrs", geom.weights(rule), val, VOIGT_WEIGHT, val)


# -- constraint sets --------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintSet:
    rows: sp.csr_matrix
    tag: str
    parent_dim: int
    rank: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def reduced_dim(self) -> int | None:
        return None if self.rank is None else self.parent_dim - self.rank

    def kernel_basis(self) -> np.ndarray:
        """Dense orthonormal basis of the constrained subspace (small problems)."""
        if self.parent_dim > DENSE_LIMIT:
            raise SpaceConstructionError(f"dense kernel of size {self.parent_dim} exceeds {DENSE_LIMIT}")
        return null_space(self.rows.toarray(), rcond=1e-10)


def _dense_rank(A: sp.spmatrix, tol: float = 1e-10) -> int:
    s = np.linalg.svd(A.toarray(), compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0] if len(s) else 0.0)))


def build_reduced_constraints(stress: StressBasis, verify: bool | None = None) -> ConstraintSet:
    """One row per cell returning the Q-mode coefficient of a stress field."""
    G = stress.S.tocsr()[Q_MODE::N_STRESS, :]
    G.eliminate_zeros()
    nt = stress.mesh.nt
    if verify is None:
        verify = stress.dim <= DENSE_LIMIT
    rank = None
    if verify:
        rank = _dense_rank(G)
        if rank != nt:
            raise SpaceConstructionError(f"reduced constraint rank {rank}, expected {nt}")
    return ConstraintSet(G, "sigma_rks", stress.dim, rank)


def build_vrks_constraints(stress: StressBasis, reduced: ConstraintSet,
                           geom: CellGeometry | None = None) -> ConstraintSet:
    """Adjoint pairing rows of an orthonormal spanning set of the reduced stress space
    against the strain-minimal displacement modes (dense; small meshes only)."""
    geom = geom or stress.geom
    Z = reduced.kernel_basis()
    Mv = sp.block_diag(list(mode_vector_pairing(geom, "veps")), format="csr")
    rows = (stress.S @ Z).T @ Mv
    rows = sp.csr_matrix(np.asarray(rows))
    rank = _dense_rank(rows)
    return ConstraintSet(rows, "v_rks", Mv.shape[1], rank, {"stress_kernel": Z})


def identity_coefficients(stress: StressBasis) -> np.ndarray:
    """Global coefficients of the constant identity tensor field."""
    from scipy.sparse.linalg import lsqr

    target = np.zeros((stress.mesh.nt, N_STRESS))
    target[:, 0] = 1.0
    target[:, 2] = 1.0
    x = lsqr(stress.S, target.ravel(), atol=1e-15, btol=1e-15, iter_lim=100000)[0]
    res = np.abs(stress.S @ x - target.ravel()).max()
    if res > 1e-8:
        raise SpaceConstructionError(f"identity field not representable (residual {res:.2e})")
    return x


def strain_voigt_of_ks(geom: CellGeometry) -> np.ndarray:
    """Constant strains (nt, 6, 3) of the local KS test functions."""
    return sym_voigt(ks_local_gradients(geom))


def ks_local_mass(geom: CellGeometry) -> np.ndarray:
    rule = quadrature(ASSEMBLY_DEGREE)
    v = ks_local_values(np.broadcast_to(rule.points, (len(geom), len(rule), 3)))
    return np.einsum("nq,nqkd,nqld->nkl", geom.weights(rule), v, v)
