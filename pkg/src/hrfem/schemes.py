"""Discrete problems: the mixed scheme, its reduced variant, the KS primal
scheme, the minimal Navier-Lame scheme and the primal-to-mixed transfer.

Sign conventions
----------------
The mixed schemes use ``(A sigma, tau) + (u, div tau) = 0`` and
``(div sigma, v) = (f, v)``, consistent with ``div sigma = f``.  For a clamped
body this convention makes the primal weak form ``(C eps u, eps v) = -(f, v)``,
so the primal solvers use the load ``-(f, v)`` and approximate the same ``u``
as the mixed ones.  The transfer routine instead follows the equivalence
equations literally: ``r`` solves ``(C eps r, eps s) = (f_h, s)`` (so ``r``
approximates ``-u``), and the recovered pair satisfies ``P0 zeta = -C eps(r)``,
``div_h zeta = f_h`` and ``r_bar = P^R r``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .assembly import (
    SaddleSystem,
    SolverError,
    assemble_A,
    assemble_B,
    assemble_primal,
    ks_load_vector,
    ks_stiffness_blocks,
    solve,
    solve_primal,
    solve_saddle,
)
from .elasticity import LameParams, compliance_apply, elasticity_apply
from .local_fe import (
    N_STRESS,
    Q_MODE,
    VECTOR_SPACES,
    VEPS,
    matrix_to_voigt,
    stress_modes,
    sym_voigt,
    vector_mode_values,
    voigt_to_matrix,
)
from .mesh import Mesh
from .quadrature import quadrature
from .spaces import (
    DENSE_LIMIT,
    ConstraintSet,
    KSSpace,
    PiecewiseSpace,
    StressBasis,
    build_constant_space,
    build_ks_space,
    build_piecewise_space,
    build_reduced_constraints,
    build_rigid_space,
    build_stress_space,
    build_vrks_constraints,
    ks_to_p1_modes,
    mode_vector_pairing,
    strain_voigt_of_ks,
)

SCHEMES = ("hr", "ks", "hr-min", "nl-min")
LoadFn = Callable[[np.ndarray, LameParams], np.ndarray]


class PostCheckError(AssertionError):
    """A discrete identity that must hold after a solve was violated."""


class Discretization:
    """All spaces of one mesh, built lazily and cached."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh

    @cached_property
    def stress(self) -> StressBasis:
        return build_stress_space(self.mesh)

    @property
    def geom(self):
        return self.stress.geom

    @cached_property
    def ks(self) -> KSSpace:
        return build_ks_space(self.mesh)

    @cached_property
    def rigid(self) -> PiecewiseSpace:
        return build_rigid_space(self.mesh, self.geom)

    @cached_property
    def p0(self) -> PiecewiseSpace:
        return build_constant_space(self.mesh, self.geom)

    @cached_property
    def veps(self) -> PiecewiseSpace:
        return build_piecewise_space(self.mesh, "veps", self.geom)

    @cached_property
    def reduced(self) -> ConstraintSet:
        return build_reduced_constraints(self.stress, verify=self.stress.dim <= DENSE_LIMIT)

    @cached_property
    def vrks(self) -> ConstraintSet:
        return build_vrks_constraints(self.stress, self.reduced)

    @cached_property
    def B_rigid(self) -> sp.csr_matrix:
        return assemble_B(self.stress, self.rigid)

    @cached_property
    def B_p0(self) -> sp.csr_matrix:
        return assemble_B(self.stress, self.p0)


def as_discretization(obj) -> Discretization:
    return obj if isinstance(obj, Discretization) else Discretization(obj)


# -- solutions ------------------------------------------------------------------

@dataclass
class DiscreteSolution:
    """Cell-wise polynomial representation of a discrete solution.

    ``sigma`` holds the six stress-mode coefficients per cell (or ``None``),
    ``u`` the coefficients of the displacement in the piecewise space
    ``u_kind`` (``rigid``, ``p0``, ``veps`` or ``p1``).
    """

    scheme: str
    mesh: Mesh
    params: LameParams
    sigma: np.ndarray | None
    u_kind: str
    u: np.ndarray
    ndof: int
    coefficients: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    @cached_property
    def _centroids(self):
        return self.mesh.centroids

    def eval_cells(self, field_name: str, cells: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluate ``field_name`` at ``points`` (m, 2) lying in ``cells`` (m,)."""
        shifted = points - self._centroids[cells]
        if field_name in ("sigma", "div_sigma"):
            if self.sigma is None:
                raise ValueError(f"scheme {self.scheme} has no stress field")
            val, div = stress_modes(shifted[:, 0], shifted[:, 1])
            coef = self.sigma[cells]
            if field_name == "sigma":
                return voigt_to_matrix(np.einsum("mrc,mr->mc", val, coef))
            return np.einsum("mrd,mr->md", div, coef)
        space = VECTOR_SPACES[self.u_kind]
        coef = self.u[cells]
        if field_name == "u":
            return np.einsum("mkd,mk->md", vector_mode_values(space, shifted), coef)
        if field_name == "eps_u":
            grad = np.einsum("kij,mk->mij", space[1], coef)
            return 0.5 * (grad + np.swapaxes(grad, -1, -2))
        raise ValueError(f"unknown field {field_name!r}")


def evaluate(solution: DiscreteSolution, points, field_name: str = "u") -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cells = solution.mesh.locate(pts)
    if np.any(cells < 0):
        raise ValueError(f"point {pts[np.argmax(cells < 0)]} lies outside the mesh")
    return solution.eval_cells(field_name, cells, pts)


def _strain_modes_from_sigma(sigma_avg_voigt: np.ndarray, params: LameParams) -> np.ndarray:
    """V^{eps,m} linear coefficients (xi,0), (eta,xi), (0,eta) of the strain A sigma."""
    e = matrix_to_voigt(compliance_apply(voigt_to_matrix(sigma_avg_voigt), params))
    return e  # Voigt (e11, e12, e22) maps one-to-one onto the three linear modes


def _p0_average(geom, sigma_modes: np.ndarray) -> np.ndarray:
    """Cell averages (nt, 3) of stress fields given by mode coefficients."""
    rule = quadrature(2)
    x = geom.shifted(rule)
    val, _ = stress_modes(x[..., 0], x[..., 1])
    return np.einsum("q,nqrc,nr->nc", rule.weights, val, sigma_modes)


def _rhs_moments(space: PiecewiseSpace, load: LoadFn, params: LameParams, degree: int = 10):
    return space.moments(load, degree, params).ravel()


# -- mixed scheme ----------------------------------------------------------------

def solve_hr(mesh, params: LameParams, load: LoadFn, check: bool = True) -> DiscreteSolution:
    """Mixed scheme over the full stress space and piecewise rigid displacements."""
    disc = as_discretization(mesh)
    A = assemble_A(disc.stress, params)
    B = disc.B_rigid
    F = _rhs_moments(disc.rigid, load, params)
    x, u, _ = solve_saddle(SaddleSystem(A, B, np.zeros(A.shape[0]), F))
    sol = DiscreteSolution(
        "hr", disc.mesh, params, disc.stress.mode_coefficients(x), "rigid",
        u.reshape(-1, 3), A.shape[0] + B.shape[0], {"sigma": x, "u": u},
    )
    if check:
        _check_hr(disc, sol, B, F)
    return sol


def _check_hr(disc, sol, B, F):
    x = sol.coefficients["sigma"]
    avg = _p0_average(disc.geom, sol.sigma)
    int_tr = float(np.sum(disc.geom.area * (avg[:, 0] + avg[:, 2])))
    norm = float(np.sqrt(max(x @ (disc.stress.S.T @ _mass_blocks(disc) @ disc.stress.S @ x), 0.0)))
    sol.checks["integral_trace"] = int_tr
    sol.checks["sigma_norm"] = norm
    scale = max(norm, np.linalg.norm(F), 1e-300)
    # the trace mean is fixed by a row scaled with 1 / (2 (lam + mu)), so
    # rounding in it grows like lam / mu
    p = sol.params
    tol = max(1e-9, 100 * np.finfo(float).eps * (1.0 + p.lam / p.mu))
    if abs(int_tr) > tol * scale:
        raise PostCheckError(f"integral of tr(sigma_h) = {int_tr:.3e} is not zero")
    res = float(np.abs(B @ x - F).max())
    sol.checks["projected_equilibrium"] = res
    if res > 1e-9 * max(np.abs(F).max(), 1.0):
        raise PostCheckError(f"P^R(div sigma_h - f) residual {res:.3e}")


def _mass_blocks(disc) -> sp.csr_matrix:
    from .spaces import stress_mass_matrices

    return sp.block_diag(list(stress_mass_matrices(disc.geom)), format="csr")


# -- KS primal --------------------------------------------------------------------

def _ks_solution(disc, scheme, params, coeffs, extra=None) -> DiscreteSolution:
    local = disc.ks.local_coefficients(coeffs)
    p1 = ks_to_p1_modes(disc.geom, local)
    grad = np.einsum("kij,nk->nij", VECTOR_SPACES["p1"][1], p1)
    strain = 0.5 * (grad + np.swapaxes(grad, -1, -2))
    sig = np.zeros((disc.mesh.nt, N_STRESS))
    sig[:, :3] = matrix_to_voigt(elasticity_apply(strain, params))
    coef = {"u": coeffs}
    coef.update(extra or {})
    return DiscreteSolution(scheme, disc.mesh, params, sig, "p1", p1, disc.ks.dim, coef)


def solve_ks_primal(mesh, params: LameParams, load: LoadFn) -> DiscreteSolution:
    """KS primal scheme with the load ``-(f, v)``; stress is ``C eps_h(u_h)``."""
    disc = as_discretization(mesh)
    _, b = assemble_primal(disc.ks, disc.geom, params, load)
    u = solve_primal(disc.ks.P, strain_voigt_of_ks(disc.geom), disc.geom, params, b)
    return _ks_solution(disc, "ks", params, u)


# -- equivalence transfer ---------------------------------------------------------

@dataclass
class TransferResult:
    zeta_modes: np.ndarray   # (nt, 6)
    zeta: np.ndarray         # global stress coefficients
    r_bar: np.ndarray        # (nt, 3) rigid coefficients
    r: np.ndarray            # KS coefficients of the primal solution
    checks: dict


def rigid_projected_load(disc: Discretization, load: LoadFn, params: LameParams):
    """Coefficients (nt, 3) of ``P^R_h f`` and a load callable evaluating it."""
    coef = disc.rigid.project(load, 10, params)
    centroids = disc.geom.centroid

    def f_h(x, _params=None):
        shifted = x - centroids[:, None, :]
        return np.einsum("nqkd,nk->nqd", vector_mode_values(VECTOR_SPACES["rigid"], shifted), coef)

    return coef, f_h


def solve_ks_reduced(disc: Discretization, params: LameParams, f_h) -> np.ndarray:
    """KS solve with the literal load ``+(f_h, s)``."""
    _, b = assemble_primal(disc.ks, disc.geom, params, f_h, load_sign=1.0, degree=4)
    return solve_primal(disc.ks.P, strain_voigt_of_ks(disc.geom), disc.geom, params, b)


def transfer_primal_to_mixed(mesh, params: LameParams, r: np.ndarray, f_h_coef: np.ndarray,
                             tol: float = 1e-9) -> TransferResult:
    """Recover the stress pair cell by cell from a KS solution ``r``.

    On every cell the dual coefficients of ``zeta`` are the moments
    ``(f_h, s)_T - (C eps r, eps s)_T`` against the six local tests.
    """
    disc = as_discretization(mesh)
    geom = disc.geom

    def f_h(x, _p=None):
        shifted = x - geom.centroid[:, None, :]
        return np.einsum("nqkd,nk->nqd", vector_mode_values(VECTOR_SPACES["rigid"], shifted), f_h_coef)

    local_r = disc.ks.local_coefficients(r)
    stiff = ks_stiffness_blocks(geom, params)
    rhs = ks_load_vector(geom, f_h, params, degree=4) - np.einsum("nst,nt->ns", stiff, local_r)
    zeta_modes = np.einsum("nrk,nk->nr", disc.stress.dual, rhs)

    # global coefficients: zeta lies in the span of the basis
    from scipy.sparse.linalg import lsqr

    z = zeta_modes.ravel()
    zeta = lsqr(disc.stress.S, z, atol=1e-15, btol=1e-15, iter_lim=200000)[0]

    p1 = ks_to_p1_modes(geom, local_r)
    r_bar = disc.rigid.project_modes("p1", p1)

    checks = {}
    scale = max(np.abs(z).max(), 1.0)
    checks["membership"] = float(np.abs(disc.stress.S @ zeta - z).max() / scale)
    checks["div_minus_fh"] = _rigid_div_residual(disc, zeta_modes, f_h_coef)
    grad = np.einsum("kij,nk->nij", VECTOR_SPACES["p1"][1], p1)
    c_eps = matrix_to_voigt(elasticity_apply(0.5 * (grad + np.swapaxes(grad, -1, -2)), params))
    avg = _p0_average(geom, zeta_modes)
    checks["p0_zeta_plus_c_eps_r"] = float(np.abs(avg + c_eps).max() / max(np.abs(avg).max(), 1.0))
    p0_r = disc.p0.project_modes("p1", p1)
    checks["p0_rbar_minus_p0_r"] = float(np.abs(r_bar[:, :2] - p0_r).max() / max(np.abs(p0_r).max(), 1e-300))
    bad = {k: v for k, v in checks.items() if v > tol}
    if bad:
        raise PostCheckError(f"transfer post-checks failed: {bad}")
    return TransferResult(zeta_modes, zeta, r_bar, r, checks)


def _rigid_div_residual(disc, sigma_modes, f_h_coef) -> float:
    """Max relative deviation of ``div_h sigma`` from a rigid field (cellwise)."""
    # div of the modes in rigid coordinates: X -> (0,1), Y -> (1,0), Q -> 2 * (-eta, xi)
    div = np.zeros_like(f_h_coef)
    div[:, 0] = sigma_modes[:, 4]
    div[:, 1] = sigma_modes[:, 3]
    div[:, 2] = -2.0 * sigma_modes[:, Q_MODE]
    return float(np.abs(div - f_h_coef).max() / max(np.abs(f_h_coef).max(), 1.0))


def solve_stressred(mesh, params: LameParams, f_h_coef: np.ndarray):
    """Direct solve of the projected mixed problem
    ``(A P0 zeta, P0 eta) - (r_bar, div eta) = 0``, ``(s, div zeta) = (f_h, s)``."""
    disc = as_discretization(mesh)
    A = assemble_A(disc.stress, params, projected=True)
    B = disc.B_rigid
    F = np.einsum("nkl,nl->nk", disc.rigid.mass, f_h_coef).ravel()
    # symmetric form: second row negated
    sys = SaddleSystem(A, -B, np.zeros(A.shape[0]), -F)
    x, r_bar, _ = solve_saddle(sys)
    return disc.stress.mode_coefficients(x), x, r_bar.reshape(-1, 3)


# -- reduced mixed scheme -------------------------------------------------------

def _reduced_system(disc, params, load, projected: bool) -> SaddleSystem:
    A = assemble_A(disc.stress, params, projected=projected)
    F = _rhs_moments(disc.p0, load, params)
    # the Q-coefficient rows scale like inverse powers of h; unit rows keep the
    # expanded matrix balanced without changing the constraint
    G = sp.csr_matrix(disc.reduced.rows)
    scale = abs(G).max(axis=1).toarray().ravel()
    G = sp.diags(1.0 / np.where(scale > 0, scale, 1.0)) @ G
    return SaddleSystem(A, disc.B_p0, np.zeros(A.shape[0]), F, G=G.tocsr())


def solve_hr_min(mesh, params: LameParams, load: LoadFn, check: bool = True) -> DiscreteSolution:
    """Lowest-degree mixed scheme over the reduced stress space and P0 displacements,
    solved in expanded form with one multiplier per cell for the Q-mode constraint."""
    disc = as_discretization(mesh)
    sys = _reduced_system(disc, params, load, projected=False)
    x, u, g = solve_saddle(sys)
    modes = disc.stress.mode_coefficients(x)
    sol = DiscreteSolution("hr-min", disc.mesh, params, modes, "p0", u.reshape(-1, 2),
                           sum(sys.sizes), {"sigma": x, "u": u, "multipliers": g})
    if check:
        q = float(np.abs(modes[:, Q_MODE]).max() / max(np.abs(modes).max(), 1e-300))
        res = float(np.abs(sys.B @ x - sys.rhs_disp).max() / max(np.abs(sys.rhs_disp).max(), 1.0))
        sol.checks.update(q_mode=q, projected_equilibrium=res)
        if q > 1e-9 or res > 1e-9:
            raise PostCheckError(f"reduced scheme post-check failed (Q-mode {q:.2e}, equilibrium {res:.2e})")
    return sol


# -- minimal Navier-Lame scheme ---------------------------------------------------

def solve_nl_min(mesh, params: LameParams, load: LoadFn, check: bool | None = None) -> DiscreteSolution:
    """Minimal Navier-Lame scheme via its auxiliary projected mixed problem.

    The auxiliary pair is recovered into ``u_eps`` cell by cell:
    ``C eps_h(u_eps) = P0 sigma_aux`` and ``P0 u_eps = u_aux``.  ``check``
    (default: small meshes only) verifies the primal equations against an
    explicit basis of the constrained displacement space.
    """
    disc = as_discretization(mesh)
    sys = _reduced_system(disc, params, load, projected=True)
    x, u_aux, g = solve_saddle(sys)
    modes = disc.stress.mode_coefficients(x)
    avg = _p0_average(disc.geom, modes)
    coef = np.zeros((disc.mesh.nt, 5))
    coef[:, :2] = u_aux.reshape(-1, 2)
    coef[:, 2:] = _strain_modes_from_sigma(avg, params)
    sig = np.zeros_like(modes)
    sig[:, :3] = avg
    sol = DiscreteSolution("nl-min", disc.mesh, params, sig, "veps", coef, disc.mesh.nt * 5,
                           {"aux_sigma": x, "aux_u": u_aux, "multipliers": g})
    if check is None:
        check = disc.stress.dim <= 600
    if check:
        sol.checks["primal_residual"] = nl_min_residual(disc, sol, load)
        if sol.checks["primal_residual"] > 1e-8:
            raise PostCheckError(f"minimal NL residual {sol.checks['primal_residual']:.2e}")
    return sol


def nl_min_residual(disc: Discretization, sol: DiscreteSolution, load: LoadFn) -> float:
    """Relative residual of ``(C eps u, eps v) + (f, P0 v) = 0`` over the
    constrained space and of the constraint itself."""
    from scipy.linalg import null_space

    params = sol.params
    nt = disc.mesh.nt
    rows = disc.vrks.rows.toarray()
    V = null_space(rows, rcond=1e-10)               # basis of V^rKS, (5 nt, k)
    # stiffness of the strain modes: eps of (xi,0), (eta,xi), (0,eta)
    e = voigt_to_matrix(sym_voigt(VEPS[1]))          # (5, 2, 2)
    ce = elasticity_apply(e, params)
    Kloc = np.einsum("sij,tij->st", ce, e)
    K = sp.kron(sp.diags(disc.geom.area), sp.csr_matrix(Kloc)).tocsr()
    int_f = disc.p0.moments(load, 10, params)         # (nt, 2) = (f, e_k)
    b = np.zeros((nt, 5))
    b[:, :2] = -int_f
    u = sol.u.ravel()
    r_eq = V.T @ (K @ u - b.ravel())
    constraint = rows @ u
    scale = max(np.abs(V.T @ b.ravel()).max(), np.abs(V.T @ (K @ u)).max(), 1e-300)
    return float(max(np.abs(r_eq).max() / scale,
                     np.abs(constraint).max() / max(np.abs(u).max(), 1e-300)))


# -- dispatch ----------------------------------------------------------------------

def run_scheme(name: str, mesh, params: LameParams, load: LoadFn) -> DiscreteSolution:
    name = name.replace("_", "-")
    if name == "hr":
        return solve_hr(mesh, params, load)
    if name == "ks":
        return solve_ks_primal(mesh, params, load)
    if name == "hr-min":
        return solve_hr_min(mesh, params, load)
    if name == "nl-min":
        return solve_nl_min(mesh, params, load)
    raise ValueError(f"unknown scheme {name!r}; choose from {', '.join(SCHEMES)}")


__all__ = [
    "SCHEMES", "Discretization", "DiscreteSolution", "PostCheckError", "SolverError",
    "TransferResult", "evaluate", "run_scheme", "solve_hr", "solve_hr_min", "solve_ks_primal",
    "solve_nl_min", "solve_stressred", "solve_ks_reduced", "transfer_primal_to_mixed",
    "rigid_projected_load", "nl_min_residual", "mode_vector_pairing",
]
