"""Sparse assembly of the global forms and deterministic direct solves."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elasticity import LameParams, compliance_inner, elasticity_apply
from .local_fe import (
    ASSEMBLY_DEGREE,
    N_STRESS,
    CellGeometry,
    ks_local_values,
    stress_modes,
    voigt_to_matrix,
)
from .quadrature import quadrature
from .spaces import (
    DENSE_LIMIT,
    KSSpace,
    PiecewiseSpace,
    StressBasis,
    div_moment_matrices,
    strain_voigt_of_ks,
)

RESIDUAL_TOL = 1e-9
REFINEMENT_STEPS = 4


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


# -- local matrices -------------------------------------------------------------

def mode_compliance_matrices(geom: CellGeometry, params: LameParams, projected: bool = False) -> np.ndarray:
    """``(A tau_r, tau_s)_T`` for the six stress modes, (nt, 6, 6).

    With ``projected`` both modes are replaced by their cell averages first.
    """
    rule = quadrature(ASSEMBLY_DEGREE)
    x = geom.shifted(rule)
    w = geom.weights(rule)
    val, _ = stress_modes(x[..., 0], x[..., 1])
    if projected:
        avg = np.einsum("nq,nqrc->nrc", w, val) / geom.area[:, None, None]
        m = voigt_to_matrix(avg)
        return geom.area[:, None, None] * compliance_inner(
            m[:, :, None], m[:, None, :], params
        )
    m = voigt_to_matrix(val)  # (n, q, 6, 2, 2)
    inner = compliance_inner(m[:, :, :, None], m[:, :, None, :], params)
    return np.einsum("nq,nqrs->nrs", w, inner)


def _galerkin(blocks: np.ndarray, left: sp.spmatrix, right: sp.spmatrix | None = None) -> sp.csr_matrix:
    right = left if right is None else right
    K = (left.T @ sp.block_diag(list(blocks), format="csr") @ right).tocsr()
    K.sum_duplicates()
    K.eliminate_zeros()
    K.sort_indices()
    return K


def symmetrize(K: sp.spmatrix) -> sp.csr_matrix:
    K = (0.5 * (K + K.T)).tocsr()
    K.eliminate_zeros()
    K.sort_indices()
    return K


# -- global forms ---------------------------------------------------------------

def assemble_A(stress: StressBasis, params: LameParams, projected: bool = False) -> sp.csr_matrix:
    return symmetrize(_galerkin(mode_compliance_matrices(stress.geom, params, projected), stress.S))


def assemble_B(stress: StressBasis, space: PiecewiseSpace) -> sp.csr_matrix:
    """``B[k, i] = (div tau_i, v_k)`` against a discontinuous displacement space."""
    blocks = div_moment_matrices(stress.geom, space.kind)
    B = (sp.block_diag(list(blocks), format="csr") @ stress.S).tocsr()
    B.eliminate_zeros()
    B.sort_indices()
    return B


def ks_stiffness_blocks(geom: CellGeometry, params: LameParams) -> np.ndarray:
    """``(C eps v_s, eps v_t)_T`` for the six local KS tests, (nt, 6, 6)."""
    e = voigt_to_matrix(strain_voigt_of_ks(geom))          # (n, 6, 2, 2)
    ce = elasticity_apply(e, params)
    return geom.area[:, None, None] * np.einsum("nsij,ntij->nst", ce, e)


def ks_load_vector(geom: CellGeometry, load, params: LameParams, degree: int = 10) -> np.ndarray:
    """``(f, v_s)_T`` for the local KS tests, (nt, 6)."""
    rule = quadrature(degree)
    x = geom.physical(rule)
    fx = load(x, params)
    v = ks_local_values(np.broadcast_to(rule.points, x.shape[:2] + (3,)))
    return np.einsum("nq,nqd,nqsd->ns", geom.weights(rule), fx, v)


def assemble_primal(ks: KSSpace, geom: CellGeometry, params: LameParams, load,
                    rhs_projector: str = "identity", load_sign: float = -1.0,
                    degree: int = 10):
    """Stiffness matrix and load vector of the KS primal problem.

    ``load_sign = -1`` gives the load functional ``-(f, v)`` that matches
    ``div sigma = f`` for a clamped body.  ``rhs_projector="p0"`` replaces the
    test function by its cell average in the load.
    """
    K = symmetrize(_galerkin(ks_stiffness_blocks(geom, params), ks.P))
    if rhs_projector == "identity":
        local = ks_load_vector(geom, load, params, degree)
    elif rhs_projector == "p0":
        rule = quadrature(degree)
        x = geom.physical(rule)
        mean_f = np.einsum("nq,nqd->nd", geom.weights(rule), load(x, params))
        # cell averages of the local tests: 1/3 for hats, 1/3 for CR functions
        local = np.concatenate(
            [np.repeat(mean_f[:, :1], 3, 1), np.repeat(mean_f[:, 1:], 3, 1)], axis=1
        ) / 3.0
    else:
        raise ValueError(f"unknown rhs projector {rhs_projector!r}")
    b = load_sign * (ks.P.T @ local.ravel())
    return K, b


def primal_pressure_system(P: sp.spmatrix, strains: np.ndarray, geom: CellGeometry,
                           params: LameParams) -> sp.csc_matrix:
    """Displacement-pressure form of a primal problem with piecewise constant divergence.

    ``strains`` holds the constant Voigt strains (nt, k, 3) of the local
    functions that ``P`` (k nt, n) maps global coefficients to.  With the
    pressure ``p = lam div_h u`` in P0 the system

        [[2 mu (eps u, eps v), (p, div v)], [(div u, q), -(p, q) / lam]]

    yields the same displacement as the stiffness ``(C eps u, eps v)`` while
    keeping all entries independent of ``lam``.
    """
    e = voigt_to_matrix(strains)
    area = geom.area
    K_mu = _galerkin(2.0 * params.mu * area[:, None, None] * np.einsum("nsij,ntij->nst", e, e), P)
    div = area[:, None] * (strains[..., 0] + strains[..., 2])        # (nt, k)
    nt, k = div.shape
    Bp = sp.csr_matrix((div.ravel(), (np.repeat(np.arange(nt), k), np.arange(nt * k))),
                       shape=(nt, nt * k)) @ P
    Mp = sp.diags(area / params.lam)
    return sp.bmat([[symmetrize(K_mu), Bp.T], [Bp, -Mp]], format="csc")


def solve_primal(P: sp.spmatrix, strains: np.ndarray, geom: CellGeometry,
                 params: LameParams, b: np.ndarray) -> np.ndarray:
    K = primal_pressure_system(P, strains, geom, params)
    x = solve(K, np.concatenate([b, np.zeros(geom.area.shape[0])]))
    return x[: P.shape[1]]


# -- saddle systems -----------------------------------------------------------------

@dataclass
class SaddleSystem:
    """``[[A, B^T, G^T], [B, 0, 0], [G, 0, 0]]`` with block sizes recorded."""

    A: sp.csr_matrix
    B: sp.csr_matrix
    rhs_stress: np.ndarray
    rhs_disp: np.ndarray
    G: sp.csr_matrix | None = None
    b_sign: float = 1.0   # sign of B^T in the first block row
    meta: dict = field(default_factory=dict)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.A.shape[0], self.B.shape[0], 0 if self.G is None else self.G.shape[0]

    def matrix(self) -> sp.csc_matrix:
        n, m, c = self.sizes
        blocks = [[self.A, self.b_sign * self.B.T], [self.B, None]]
        if self.G is not None:
            blocks[0].append(self.G.T)
            blocks[1].append(None)
            blocks.append([self.G, None, None])
        K = sp.bmat(blocks, format="csc")
        if K.shape != (n + m + c, n + m + c):
            raise ValueError("inconsistent block sizes")
        return K

    def rhs(self) -> np.ndarray:
        n, m, c = self.sizes
        return np.concatenate([self.rhs_stress, self.rhs_disp, np.zeros(c)])

    def split(self, x: np.ndarray):
        n, m, c = self.sizes
        return x[:n], x[n:n + m], x[n + m:]


def solve(K, b: np.ndarray, dense_limit: int = 0) -> np.ndarray:
    """Direct solve with a relative residual check.

    Sparse LU with partial pivoting (SuperLU) by default; systems with at most
    ``dense_limit`` unknowns use a dense LAPACK solve.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if n == 0:
        return b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    try:
        if sp.issparse(K) and n > dense_limit:
            # symmetric equilibration by row norms keeps saddle blocks of very
            # different scale from dominating the pivots
            rmax = np.sqrt(abs(sp.csr_matrix(K)).max(axis=1).toarray().ravel())
            d = sp.diags(1.0 / np.where(rmax > 0, rmax, 1.0))
            lu = spla.splu(sp.csc_matrix(d @ K @ d), permc_spec="COLAMD")
            x = d @ lu.solve(d @ b)
            # iterative refinement absorbs pivot growth on ill-conditioned systems
            for _ in range(REFINEMENT_STEPS):
                r = b - K @ x
                if np.linalg.norm(r) <= 0.1 * RESIDUAL_TOL * bnorm:
                    break
                x = x + d @ lu.solve(d @ r)
        else:
            Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
            x = sla.solve(Kd, b)
    except (RuntimeError, sla.LinAlgError) as exc:
        raise SolverError(f"factorization failed: {exc}") from exc
    res = float(np.linalg.norm(b - K @ x) / bnorm)
    if not np.isfinite(res) or res > RESIDUAL_TOL:
        raise SolverError(f"relative residual {res:.3e} exceeds {RESIDUAL_TOL:g}", res)
    return x


def solve_saddle(system: SaddleSystem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return system.split(solve(system.matrix(), system.rhs()))


def dense_solve(K, b) -> np.ndarray:
    n = np.shape(b)[0]
    if n > DENSE_LIMIT:
        raise SolverError(f"dense solve limited to {DENSE_LIMIT} unknowns, got {n}")
    return solve(K, b, dense_limit=DENSE_LIMIT)


def dump_coo(K: sp.spmatrix, path) -> None:
    """Write ``i j value`` lines (0-based) in row-major order."""
    coo = sp.coo_matrix(K)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"{K.shape[0]} {K.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{int(i)} {int(j)} {float(v)!r}\n")
