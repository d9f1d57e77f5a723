"""Per-cell shape spaces, local pairing matrices and the local dual basis.

All monomial modes are written in coordinates shifted to the cell centroid,
``xi = x - xc`` and ``eta = y - yc``.  Symmetric tensors are stored in Voigt
order ``(t11, t12, t22)``; the Frobenius product is ``a11 b11 + 2 a12 b12 + a22 b22``.

Stress modes of the six-dimensional space (the first five span the reduced
space)::

    0 E11   1 E12   2 E22   3 X = (0, xi; xi, 0)   4 Y = (0, eta; eta, 0)
    5 Q = (0, xi^2 - eta^2; xi^2 - eta^2, 0)

Local Kouhia-Stenberg test functions on a cell, in this order::

    0..2  (lambda_k, 0)        vertex hat of local vertex k
    3..5  (0, 1 - 2 lambda_k)  Crouzeix-Raviart function of local edge k
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space, subspace_angles

from .mesh import Mesh
from .quadrature import QuadRule, quadrature

N_STRESS = 6
N_STRESS_REDUCED = 5
Q_MODE = 5
STRESS_MODE_NAMES = ("E11", "E12", "E22", "X", "Y", "Q")
VOIGT_WEIGHT = np.array([1.0, 2.0, 1.0])
ASSEMBLY_DEGREE = 4
DUAL_TOL = 1e-10


class DegenerateCellError(ArithmeticError):
    pass


@dataclass(frozen=True)
class CellGeometry:
    """Vectorised affine data for a set of cells."""

    cells: np.ndarray      # (n,) cell indices in the parent mesh
    points: np.ndarray     # (n, 3, 2)
    area: np.ndarray       # (n,)
    centroid: np.ndarray   # (n, 2)
    grad_bary: np.ndarray  # (n, 3, 2)

    @classmethod
    def from_points(cls, points, cells=None) -> "CellGeometry":
        p = np.asarray(points, dtype=float).reshape(-1, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if np.any(det <= 0):
            raise DegenerateCellError("cells must have positive area")
        # grad lambda_i = rot(p_{i+2} - p_{i+1}) / det
        nxt = p[:, [1, 2, 0]]
        nnx = p[:, [2, 0, 1]]
        e = nnx - nxt
        grad = np.stack([-e[..., 1], e[..., 0]], axis=-1) / det[:, None, None]
        if cells is None:
            cells = np.arange(len(p))
        return cls(np.asarray(cells), p, 0.5 * det, p.mean(axis=1), grad)

    @classmethod
    def from_mesh(cls, mesh: Mesh, cells=None) -> "CellGeometry":
        idx = np.arange(mesh.nt) if cells is None else np.atleast_1d(cells)
        return cls.from_points(mesh.vertices[mesh.triangles[idx]], idx)

    def __len__(self) -> int:
        return len(self.area)

    def physical(self, rule: QuadRule) -> np.ndarray:
        """Quadrature points, shape (n, nq, 2)."""
        return np.einsum("qk,nkd->nqd", rule.points, self.points)

    def shifted(self, rule: QuadRule) -> np.ndarray:
        return self.physical(rule) - self.centroid[:, None, :]

    def weights(self, rule: QuadRule) -> np.ndarray:
        """Area-scaled weights, shape (n, nq)."""
        return self.area[:, None] * rule.weights[None, :]

    def barycentric(self, x: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of points ``x`` of shape (n, m, 2)."""
        r = x - self.points[:, None, 0, :]
        lam12 = np.einsum("nmd,nkd->nmk", r, self.grad_bary[:, 1:, :])
        return np.concatenate([1.0 - lam12.sum(-1, keepdims=True), lam12], axis=-1)


# -- mode evaluation ----------------------------------------------------------

def stress_modes(xi: np.ndarray, eta: np.ndarray):
    """Values (..., 6, 3) in Voigt form and divergences (..., 6, 2)."""
    shape = np.shape(xi)
    val = np.zeros(shape + (N_STRESS, 3))
    val[..., 0, 0] = 1.0
    val[..., 1, 1] = 1.0
    val[..., 2, 2] = 1.0
    val[..., 3, 1] = xi
    val[..., 4, 1] = eta
    val[..., 5, 1] = xi**2 - eta**2
    div = np.zeros(shape + (N_STRESS, 2))
    div[..., 3, 1] = 1.0
    div[..., 4, 0] = 1.0
    div[..., 5, 0] = -2.0 * eta
    div[..., 5, 1] = 2.0 * xi
    return val, div


def ks_local_values(bary: np.ndarray) -> np.ndarray:
    """Values (..., 6, 2) of the local KS test functions."""
    shape = bary.shape[:-1]
    v = np.zeros(shape + (6, 2))
    v[..., 0:3, 0] = bary
    v[..., 3:6, 1] = 1.0 - 2.0 * bary
    return v


def ks_local_gradients(geom: CellGeometry) -> np.ndarray:
    """Constant gradients (n, 6, 2, 2), ``g[..., i, j] = d_j v_i``."""
    g = np.zeros((len(geom), 6, 2, 2))
    g[:, 0:3, 0, :] = geom.grad_bary
    g[:, 3:6, 1, :] = -2.0 * geom.grad_bary
    return g


# vector modes in centroid coordinates: (constant part, linear part) with
# v(xi, eta) = c + L @ (xi, eta); gradient is L.
def _vector_space(rows):
    c = np.array([r[0] for r in rows], dtype=float)
    L = np.array([r[1] for r in rows], dtype=float)
    return c, L


RIGID = _vector_space([
    ((1, 0), ((0, 0), (0, 0))),
    ((0, 1), ((0, 0), (0, 0))),
    ((0, 0), ((0, 1), (-1, 0))),   # (eta, -xi)
])
P0 = _vector_space([
    ((1, 0), ((0, 0), (0, 0))),
    ((0, 1), ((0, 0), (0, 0))),
])
VEPS = _vector_space([
    ((1, 0), ((0, 0), (0, 0))),
    ((0, 1), ((0, 0), (0, 0))),
    ((0, 0), ((1, 0), (0, 0))),    # (xi, 0)
    ((0, 0), ((0, 1), (1, 0))),    # (eta, xi)
    ((0, 0), ((0, 0), (0, 1))),    # (0, eta)
])
P1 = _vector_space([
    ((1, 0), ((0, 0), (0, 0))),
    ((0, 1), ((0, 0), (0, 0))),
    ((0, 0), ((1, 0), (0, 0))),    # (xi, 0)
    ((0, 0), ((0, 1), (0, 0))),    # (eta, 0)
    ((0, 0), ((0, 0), (1, 0))),    # (0, xi)
    ((0, 0), ((0, 0), (0, 1))),    # (0, eta)
])
VECTOR_SPACES = {"rigid": RIGID, "p0": P0, "veps": VEPS, "p1": P1}


def vector_mode_values(space, shifted: np.ndarray) -> np.ndarray:
    """Values (..., k, 2) of linear vector modes at centroid-shifted points."""
    c, L = space
    return c + np.einsum("kij,...j->...ki", L, shifted)


def vector_mode_gradients(space) -> np.ndarray:
    return space[1]


def sym_voigt(grad: np.ndarray) -> np.ndarray:
    """Symmetric part of (..., 2, 2) gradients in Voigt form."""
    return np.stack(
        [grad[..., 0, 0], 0.5 * (grad[..., 0, 1] + grad[..., 1, 0]), grad[..., 1, 1]], axis=-1
    )


def tensor_dot_grad(tau: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``tau : grad`` for Voigt ``tau`` (..., 3) and full gradient (..., 2, 2)."""
    return (
        tau[..., 0] * grad[..., 0, 0]
        + tau[..., 1] * (grad[..., 0, 1] + grad[..., 1, 0])
        + tau[..., 2] * grad[..., 1, 1]
    )


def voigt_to_matrix(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    return np.stack(
        [np.stack([t[..., 0], t[..., 1]], -1), np.stack([t[..., 1], t[..., 2]], -1)], -2
    )


def matrix_to_voigt(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    return np.stack([m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1]], -1)


# -- pairing and dual basis ---------------------------------------------------

def pairing_matrices(geom: CellGeometry, degree: int = ASSEMBLY_DEGREE) -> np.ndarray:
    """``M[n, r, s] = (div tau_r, v_s)_T + (tau_r, eps(v_s))_T`` for every cell.

    ``tau_r`` runs over the six stress modes and ``v_s`` over the six local
    KS test functions.
    """
    rule = quadrature(degree)
    x = geom.shifted(rule)
    w = geom.weights(rule)
    val, div = stress_modes(x[..., 0], x[..., 1])
    v = ks_local_values(np.broadcast_to(rule.points, x.shape[:2] + (3,)))
    g = ks_local_gradients(geom)
    div_term = np.einsum("nq,nqrd,nqsd->nrs", w, div, v)
    tau_int = np.einsum("nq,nqrc->nrc", w, val)
    grad_term = tensor_dot_grad(tau_int[:, :, None, :], g[:, None, :, :, :])
    return div_term + grad_term


def local_pairing_matrix(mesh: Mesh, cell: int) -> np.ndarray:
    M = pairing_matrices(CellGeometry.from_mesh(mesh, [cell]))[0]
    if np.linalg.matrix_rank(M) < N_STRESS:
        raise DegenerateCellError(f"pairing matrix of cell {cell} is singular")
    return M


def dual_coefficients(geom: CellGeometry, M: np.ndarray | None = None) -> np.ndarray:
    """Coefficients ``C`` (n, 6, 6) with ``M^T C = I``.

    Column ``k`` of ``C[n]`` holds the stress-mode coefficients of the dual
    function that pairs to one with local test ``k`` and to zero with the rest.
    """
    if M is None:
        M = pairing_matrices(geom)
    MT = np.swapaxes(M, 1, 2)
    try:
        C = np.linalg.solve(MT, np.broadcast_to(np.eye(N_STRESS), M.shape))
    except np.linalg.LinAlgError as exc:
        raise DegenerateCellError("singular local pairing matrix") from exc
    res = np.abs(MT @ C - np.eye(N_STRESS)).max(axis=(1, 2))
    if np.any(res > DUAL_TOL):
        bad = int(geom.cells[np.argmax(res)])
        raise DegenerateCellError(f"dual basis residual {res.max():.2e} on cell {bad}")
    return C


@dataclass(frozen=True)
class LocalTensorBasis:
    cell: int
    modes: tuple[str, ...]
    dual: np.ndarray   # (6, 6): column k = mode coefficients of dual function k

    def pairing_residual(self, M: np.ndarray) -> float:
        return float(np.abs(M.T @ self.dual - np.eye(N_STRESS)).max())


@dataclass(frozen=True)
class LocalVectorBasis:
    cell: int
    spaces: dict


def local_dual_basis(mesh: Mesh, cell: int) -> LocalTensorBasis:
    geom = CellGeometry.from_mesh(mesh, [cell])
    C = dual_coefficients(geom)[0]
    return LocalTensorBasis(cell, STRESS_MODE_NAMES, C)


def local_vector_basis(cell: int) -> LocalVectorBasis:
    return LocalVectorBasis(cell, dict(VECTOR_SPACES))


# -- local kernel / range identities ------------------------------------------

@dataclass(frozen=True)
class KernelRangeReport:
    cell: int
    dims: dict
    defects: dict

    @property
    def max_defect(self) -> float:
        return max(self.defects.values())


def _fit_p1(values: np.ndarray, shifted: np.ndarray) -> np.ndarray:
    """Coefficients in the P1 vector modes of sampled linear fields.

    ``values`` has shape (nq, k, 2); returns (k, 6).
    """
    basis = vector_mode_values(P1, shifted)            # (nq, 6, 2)
    A = basis.transpose(0, 2, 1).reshape(-1, 6)        # (nq*2, 6)
    b = values.transpose(0, 2, 1).reshape(-1, values.shape[1])
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    return coef.T


def _defect(a: np.ndarray, b: np.ndarray) -> float:
    """Largest principal-angle sine between column spans (inf on dim mismatch)."""
    if a.shape[1] != b.shape[1]:
        return float("inf")
    if a.shape[1] == 0:
        return 0.0
    return float(np.sin(subspace_angles(a, b)).max())


def local_kernel_range_check(mesh: Mesh, cell: int, tol: float = 1e-12) -> KernelRangeReport:
    geom = CellGeometry.from_mesh(mesh, [cell])
    rule = quadrature(ASSEMBLY_DEGREE)
    x = geom.shifted(rule)[0]
    h = float(np.linalg.norm(geom.points[0, 1] - geom.points[0, 0]))

    _, div = stress_modes(x[:, 0], x[:, 1])
    D = _fit_p1(div, x).T                              # P1 coeffs x stress modes
    # scale columns by powers of the cell size so rank decisions are h-free
    D_scaled = D * np.array([1, 1, 1, h, h, h * h])
    rank_tol = tol * max(1.0, np.abs(D_scaled).max()) * 10
    ker_div = null_space(D_scaled, rcond=rank_tol)
    const = np.eye(N_STRESS)[:, :3]
    rigid_in_p1 = np.array([[1, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0], [0, 0, 0, 1, -1, 0]]).T
    p0_in_p1 = np.eye(6)[:, :2]
    range_div = _orth(D_scaled, rank_tol)

    # eps on P1 modes, Voigt coefficients
    E = sym_voigt(P1[1]).T                             # (3, 6)
    ker_eps = null_space(E)
    range_eps = _orth(E, 1e-12)

    Dm = D_scaled[:, :N_STRESS_REDUCED]
    range_div_m = _orth(Dm, rank_tol)
    Ev = sym_voigt(VEPS[1]).T                          # (3, 5)
    ker_eps_v = null_space(Ev)

    dims = {
        "ker_div_sigma_mplus": ker_div.shape[1],
        "range_div_sigma_mplus": range_div.shape[1],
        "ker_eps_p1": ker_eps.shape[1],
        "range_div_sigma_m": range_div_m.shape[1],
        "ker_eps_veps": ker_eps_v.shape[1],
    }
    defects = {
        "ker_div_sigma_mplus": _defect(ker_div, const),
        "range_eps_p1": _defect(range_eps, np.eye(3)),
        "range_div_sigma_mplus": _defect(range_div, rigid_in_p1),
        "ker_eps_p1": _defect(ker_eps, rigid_in_p1),
        "range_div_sigma_m": _defect(range_div_m, p0_in_p1),
        "ker_eps_veps": _defect(ker_eps_v, np.eye(5)[:, :2]),
    }
    return KernelRangeReport(cell, dims, defects)


def _orth(A: np.ndarray, tol: float) -> np.ndarray:
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    r = int(np.sum(s > tol * max(1.0, s[0] if len(s) else 0.0)))
    return U[:, :r]
