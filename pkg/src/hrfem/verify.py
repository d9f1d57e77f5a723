"""Structural checks, discrete Poincare constants, error norms and convergence studies."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import null_space

from .elasticity import LameParams, ManufacturedCase, deviatoric, manufactured_case
from .local_fe import (
    ASSEMBLY_DEGREE,
    N_STRESS,
    RIGID,
    VEPS,
    CellGeometry,
    local_kernel_range_check,
    stress_modes,
    sym_voigt,
    vector_mode_values,
    voigt_to_matrix,
)
from .mesh import Mesh, mesh_from_spec, refine_uniform
from .quadrature import quadrature
from .schemes import (
    Discretization,
    DiscreteSolution,
    as_discretization,
    rigid_projected_load,
    run_scheme,
    solve_ks_reduced,
    solve_stressred,
    transfer_primal_to_mixed,
)
from .spaces import (
    DENSE_LIMIT,
    GROUP_INTERIOR_VERTEX,
    adjoint_matrix,
    identity_coefficients,
    ks_local_mass,
    stress_mass_matrices,
    strain_voigt_of_ks,
)

ERROR_DEGREE = 10
CSV_HEADER = tuple(("scheme,case,level,h,ndof,lambda,err_u_l2,err_sigma_l2,err_div_l2,"
                    "err_energy,rate_u,rate_sigma,rate_div,rate_energy").split(","))
NORMS = ("u", "sigma", "div", "energy")
DEFAULT_SEED = 42


# -- adjoint identity -------------------------------------------------------------

def check_adjoint_matrix(mesh, stress=None) -> float:
    """Largest ``|(div tau, v) + (tau, eps_h v)|`` over stress and KS basis pairs.

    The local duals pair to one with their own test function, so the value is
    already relative to the natural scale of the pairing.
    """
    disc = as_discretization(mesh)
    stress = disc.stress if stress is None else stress
    R = adjoint_matrix(stress, disc.ks)
    return float(np.abs(R.data).max()) if R.nnz else 0.0


def perturbed_stress(stress, column: int, row_offset: int, delta: float):
    """Copy of ``stress`` with one mode coefficient of one basis function shifted."""
    from dataclasses import replace

    S = stress.S.tolil(copy=True)
    rows = stress.S[:, column].nonzero()[0]
    S[rows[row_offset % len(rows)], column] += delta
    return replace(stress, S=S.tocsc())


# -- dimension and support accounting ---------------------------------------------

@dataclass
class StructureReport:
    dims: dict
    passed: bool
    details: dict = field(default_factory=dict)


def check_structure(mesh, tol: float = 1e-10) -> StructureReport:
    """Dimension formula, support counts, local kernel/range identities and
    divergence range inclusions."""
    disc = as_discretization(mesh)
    m = disc.mesh
    st = disc.stress
    expected = 6 * m.nt - len(m.interior_edges) - len(m.interior_vertices)
    per_cell = max(len(c) for c in st.cell_functions)
    group2 = Counter(st.entity[st.group == GROUP_INTERIOR_VERTEX].tolist())
    patches = m.vertex_patches()
    valence_ok = all(group2[a] == len(patches[a]) - 1 for a in m.interior_vertices)
    valence = {int(a): (len(patches[a]), group2[int(a)]) for a in m.interior_vertices}
    supports = np.diff(st.S.indptr)
    cells_per_fn = np.array([len(set(st.S.indices[st.S.indptr[j]:st.S.indptr[j + 1]] // N_STRESS))
                             for j in range(st.dim)])
    local = max(local_kernel_range_check(m, t).max_defect for t in range(m.nt))
    div_rigid = divergence_rigid_residual(disc)
    dims = {
        "nt": m.nt, "interior_edges": len(m.interior_edges),
        "interior_vertices": len(m.interior_vertices),
        "stress": st.dim, "expected_stress": expected, "ks": disc.ks.dim,
        "max_functions_per_cell": per_cell, "max_cells_per_function": int(cells_per_fn.max()),
    }
    details = {
        "local_kernel_range_defect": local,
        "div_rigid_residual": div_rigid,
        "valence": valence,
        "nonzero_columns": int((supports > 0).sum()),
    }
    if st.dim <= DENSE_LIMIT:
        red = disc.reduced
        dims["reduced_stress"] = red.reduced_dim
        details["reduced_div_range_p0"] = reduced_divergence_range(disc)
    passed = (
        st.dim == expected and per_cell <= 9 and cells_per_fn.max() <= 2 and valence_ok
        and local <= tol and div_rigid <= tol
        and details.get("reduced_div_range_p0", True) is True
    )
    return StructureReport(dims, bool(passed), details)


def divergence_rigid_residual(disc: Discretization) -> float:
    """Largest relative L2 distance of a basis divergence from the rigid fields.

    Works through per-cell Gram matrices of the mode residuals so that the
    value for every basis function is a diagonal entry of a sparse product.
    """
    geom = disc.geom
    rule = quadrature(ASSEMBLY_DEGREE)
    x = geom.shifted(rule)
    w = geom.weights(rule)
    _, div = stress_modes(x[..., 0], x[..., 1])                     # (nt, q, 6, 2)
    rig = vector_mode_values(RIGID, x)                               # (nt, q, 3, 2)
    rhs = np.einsum("nq,nqrc,nqkc->nkr", w, div, rig)
    coef = np.linalg.solve(disc.rigid.mass, rhs)                     # (nt, 3, 6)
    res = div - np.einsum("nqkc,nkr->nqrc", rig, coef)
    R = sp.block_diag(list(np.einsum("nq,nqrc,nqsc->nrs", w, res, res)), format="csr")
    K = sp.block_diag(list(_div_gram(geom)), format="csr")
    S = disc.stress.S
    err = np.asarray(S.multiply(R @ S).sum(axis=0)).ravel()
    tot = np.asarray(S.multiply(K @ S).sum(axis=0)).ravel()
    mask = tot > 0
    if not mask.any():
        return 0.0
    return float(np.sqrt(np.max(np.abs(err[mask]) / tot[mask])))


def reduced_divergence_range(disc: Discretization) -> bool:
    """Whether ``div_h`` maps the reduced stress space onto all of P0 (dense check)."""
    Z = disc.reduced.kernel_basis()
    B0 = disc.B_p0.toarray() @ Z
    s = np.linalg.svd(B0, compute_uv=False)
    rank = int(np.sum(s > 1e-10 * s[0]))
    # divergence is also piecewise constant on the reduced space
    return rank == 2 * disc.mesh.nt


# -- index of closed range ---------------------------------------------------------

ICR_PAIRS = ("div_on_sigma_mplus", "eps_on_vepsm", "div_on_sigma_ks", "eps_on_ks",
             "div_on_sigma_rks", "eps_on_vrks")


@dataclass
class SpectralReport:
    pair: str
    icr: float
    kernel_dim: int
    ndof: int
    h: float
    level: int | None = None


def _div_gram(geom: CellGeometry) -> np.ndarray:
    rule = quadrature(ASSEMBLY_DEGREE)
    x = geom.shifted(rule)
    _, div = stress_modes(x[..., 0], x[..., 1])
    return np.einsum("nq,nqrd,nqsd->nrs", geom.weights(rule), div, div)


def _veps_blocks(geom: CellGeometry):
    rule = quadrature(ASSEMBLY_DEGREE)
    x = geom.shifted(rule)
    phi = vector_mode_values(VEPS, x)
    mass = np.einsum("nq,nqkd,nqld->nkl", geom.weights(rule), phi, phi)
    e = voigt_to_matrix(sym_voigt(VEPS[1]))
    k = np.einsum("sij,tij->st", e, e)
    return geom.area[:, None, None] * k[None], mass


def _smallest_nonzero(K: np.ndarray, M: np.ndarray, rel_tol: float = 1e-9):
    ev = sla.eigh(K, M, eigvals_only=True)
    top = max(ev.max(), 1e-300)
    nz = ev[ev > rel_tol * top]
    return float(nz.min()), int(len(ev) - len(nz))


def _blockwise(Ks: np.ndarray, Ms: np.ndarray):
    worst, kdim = np.inf, 0
    for K, M in zip(Ks, Ms):
        lam, k = _smallest_nonzero(K, M)
        worst = min(worst, lam)
        kdim += k
    return worst, kdim


def compute_icr(pair: str, mesh, level: int | None = None) -> SpectralReport:
    """``icr = sup ||v|| / ||T v||`` over the complement of the kernel of ``T``."""
    disc = as_discretization(mesh)
    geom = disc.geom
    m = disc.mesh
    if pair == "div_on_sigma_mplus":
        lam, kdim = _blockwise(_div_gram(geom), stress_mass_matrices(geom))
        ndof = N_STRESS * m.nt
    elif pair == "eps_on_vepsm":
        K, M = _veps_blocks(geom)
        lam, kdim = _blockwise(K, M)
        ndof = 5 * m.nt
    else:
        if pair in ("div_on_sigma_ks", "div_on_sigma_rks"):
            S = disc.stress.S
            basis = S.toarray() if pair == "div_on_sigma_ks" else S @ disc.reduced.kernel_basis()
            Kb = sp.block_diag(list(_div_gram(geom)), format="csr")
            Mb = sp.block_diag(list(stress_mass_matrices(geom)), format="csr")
        elif pair == "eps_on_ks":
            basis = disc.ks.P.toarray()
            e = voigt_to_matrix(strain_voigt_of_ks(geom))
            Kb = sp.block_diag(list(geom.area[:, None, None] * np.einsum("nsij,ntij->nst", e, e)), format="csr")
            Mb = sp.block_diag(list(ks_local_mass(geom)), format="csr")
        elif pair == "eps_on_vrks":
            basis = null_space(disc.vrks.rows.toarray(), rcond=1e-10)
            K, M = _veps_blocks(geom)
            Kb = sp.block_diag(list(K), format="csr")
            Mb = sp.block_diag(list(M), format="csr")
        else:
            raise ValueError(f"unknown operator pair {pair!r}; choose from {', '.join(ICR_PAIRS)}")
        ndof = basis.shape[1]
        if ndof > DENSE_LIMIT:
            raise ValueError(f"dense eigensolve limited to {DENSE_LIMIT} unknowns, got {ndof}")
        K = basis.T @ (Kb @ basis)
        M = basis.T @ (Mb @ basis)
        lam, kdim = _smallest_nonzero(0.5 * (K + K.T), 0.5 * (M + M.T))
    return SpectralReport(pair, 1.0 / math.sqrt(lam), kdim, ndof, m.h, level)


def icr_sequence(pair: str, base: str = "crisscross:2", levels: int = 3) -> list[SpectralReport]:
    mesh = mesh_from_spec(base)
    out = []
    for lev in range(levels):
        out.append(compute_icr(pair, mesh, lev))
        mesh = refine_uniform(mesh)
    return out


def icr_inequality(mesh) -> dict:
    """Measured values of ``icr(div, KS') <= 2 icr(div, Sigma^m+) + icr(eps, V^KS)``."""
    disc = as_discretization(mesh)
    lhs = compute_icr("div_on_sigma_ks", disc).icr
    a = compute_icr("div_on_sigma_mplus", disc).icr
    b = compute_icr("eps_on_ks", disc).icr
    return {"lhs": lhs, "rhs": 2 * a + b, "holds": lhs <= 2 * a + b}


# -- trace/deviator Poincare ---------------------------------------------------------

@dataclass
class PoincareReport:
    worst_ratio: float      # max over samples of ||tau|| / (||tau^D|| + ||div tau||)
    sharp_constant: float | None  # sup of ||tau|| / sqrt(||tau^D||^2 + ||div tau||^2)
    samples: int
    seed: int


def _dev_mass(geom: CellGeometry) -> np.ndarray:
    rule = quadrature(ASSEMBLY_DEGREE)
    x = geom.shifted(rule)
    val, _ = stress_modes(x[..., 0], x[..., 1])
    d = deviatoric(voigt_to_matrix(val))
    return np.einsum("nq,nqrij,nqsij->nrs", geom.weights(rule), d, d)


def _trace_row(disc) -> np.ndarray:
    """``int tr(tau_i)`` for every basis function."""
    geom = disc.geom
    rule = quadrature(2)
    x = geom.shifted(rule)
    val, _ = stress_modes(x[..., 0], x[..., 1])
    tr = np.einsum("nq,nqr->nr", geom.weights(rule), val[..., 0] + val[..., 2])
    return disc.stress.S.T @ tr.ravel()


def check_tr_dev_poincare(mesh, samples: int = 200, seed: int = DEFAULT_SEED,
                          sharp: bool = True) -> PoincareReport:
    if samples <= 0:
        raise ValueError("empty sample: at least one random stress is required")
    disc = as_discretization(mesh)
    geom = disc.geom
    S = disc.stress.S
    Mb = sp.block_diag(list(stress_mass_matrices(geom)), format="csr")
    Db = sp.block_diag(list(_dev_mass(geom)), format="csr")
    Kb = sp.block_diag(list(_div_gram(geom)), format="csr")
    N, Nd, Nk = (S.T @ B @ S for B in (Mb, Db, Kb))
    trow = _trace_row(disc)
    ident = identity_coefficients(disc.stress)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((disc.stress.dim, samples))
    X -= np.outer(ident, (trow @ X) / (trow @ ident))

    def qf(A, Y):
        return np.sqrt(np.maximum(np.einsum("is,is->s", Y, A @ Y), 0.0))

    ratio = qf(N, X) / (qf(Nd, X) + qf(Nk, X))
    const = None
    if sharp and disc.stress.dim <= DENSE_LIMIT:
        Q = null_space(trow[None, :])
        A = Q.T @ (N @ Q)
        B = Q.T @ ((Nd + Nk) @ Q)
        const = float(np.sqrt(sla.eigh(0.5 * (A + A.T), 0.5 * (B + B.T), eigvals_only=True).max()))
    return PoincareReport(float(ratio.max()), const, samples, seed)


# -- equivalence ---------------------------------------------------------------------

def check_equivalence(mesh, params: LameParams, case: str | ManufacturedCase = "trig_generic") -> dict:
    """Compare the cell-wise transfer of a KS solution with the direct projected mixed solve."""
    disc = as_discretization(mesh)
    case = manufactured_case(case) if isinstance(case, str) else case
    coef, f_h = rigid_projected_load(disc, case.f, params)
    r = solve_ks_reduced(disc, params, f_h)
    tr = transfer_primal_to_mixed(disc, params, r, coef)
    modes, _, r_bar = solve_stressred(disc, params, coef)
    scale = max(np.abs(modes).max(), 1e-300)
    return {
        "stress_mismatch": float(np.abs(modes - tr.zeta_modes).max() / scale),
        "r_bar_mismatch": float(np.abs(r_bar - tr.r_bar).max() / max(np.abs(r_bar).max(), 1e-300)),
        **tr.checks,
    }


# -- error norms -----------------------------------------------------------------------

@dataclass
class ErrorRecord:
    u: float
    sigma: float | None
    div: float | None
    energy: float | None


def error_norms(solution: DiscreteSolution, case: ManufacturedCase, degree: int = ERROR_DEGREE) -> ErrorRecord:
    """L2 errors of displacement, stress and divergence, and the broken strain error.

    Divergence errors are omitted for schemes whose stress is a strain of the
    displacement (piecewise constant, zero divergence); strain errors are
    omitted for piecewise rigid or constant displacements.
    """
    mesh = solution.mesh
    rule = quadrature(degree)
    geom = CellGeometry.from_mesh(mesh)
    x = geom.physical(rule)
    w = geom.weights(rule).ravel()
    cells = np.repeat(np.arange(mesh.nt), len(rule))
    pts = x.reshape(-1, 2)
    p = solution.params

    def l2(a):
        return float(np.sqrt(w @ a))

    eu = l2(((case.u(pts) - solution.eval_cells("u", cells, pts)) ** 2).sum(-1))
    es = ed = ee = None
    if solution.sigma is not None:
        es = l2(((case.sigma(pts, p) - solution.eval_cells("sigma", cells, pts)) ** 2).sum((-1, -2)))
    if solution.scheme in ("hr", "hr-min"):
        ed = l2(((case.f(pts, p) - solution.eval_cells("div_sigma", cells, pts)) ** 2).sum(-1))
    if solution.u_kind in ("p1", "veps"):
        ee = l2(((case.eps(pts) - solution.eval_cells("eps_u", cells, pts)) ** 2).sum((-1, -2)))
    return ErrorRecord(eu, es, ed, ee)


def exact_norms(case: ManufacturedCase, mesh: Mesh, params: LameParams, degree: int = ERROR_DEGREE) -> ErrorRecord:
    """L2 norms of the exact fields, computed with the same rule as the errors."""
    rule = quadrature(degree)
    geom = CellGeometry.from_mesh(mesh)
    pts = geom.physical(rule).reshape(-1, 2)
    w = geom.weights(rule).ravel()
    return ErrorRecord(
        float(np.sqrt(w @ (case.u(pts) ** 2).sum(-1))),
        float(np.sqrt(w @ (case.sigma(pts, params) ** 2).sum((-1, -2)))),
        float(np.sqrt(w @ (case.f(pts, params) ** 2).sum(-1))),
        float(np.sqrt(w @ (case.eps(pts) ** 2).sum((-1, -2)))),
    )


# -- convergence study -------------------------------------------------------------------

@dataclass
class StudyRow:
    scheme: str
    case: str
    level: int
    h: float
    ndof: int
    lam: float
    errors: ErrorRecord
    rates: dict = field(default_factory=dict)


@dataclass
class StudyTable:
    scheme: str
    case: str
    rows: list[StudyRow]
    seed: int = DEFAULT_SEED
    complete: bool = True

    def lambdas(self) -> list[float]:
        return sorted({r.lam for r in self.rows})

    def series(self, lam: float) -> list[StudyRow]:
        return sorted((r for r in self.rows if r.lam == lam), key=lambda r: r.level)

    def finest_rate(self, norm: str, lam: float) -> float | None:
        s = self.series(lam)
        return s[-1].rates.get(norm) if s else None

    def robustness(self, norm: str) -> float:
        """max / min over lambda of the finest-level error."""
        vals = [getattr(self.series(l)[-1].errors, norm) for l in self.lambdas()]
        vals = [v for v in vals if v is not None]
        return max(vals) / min(vals)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for lam in self.lambdas():
            for r in self.series(lam):
                e = r.errors
                w.writerow([
                    r.scheme, r.case, r.level, _fmt(r.h), r.ndof, _fmt(r.lam),
                    _fmt(e.u), _fmt(e.sigma), _fmt(e.div), _fmt(e.energy),
                    *(_fmt(r.rates.get(n)) for n in NORMS),
                ])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


class StudyAborted(RuntimeError):
    def __init__(self, message: str, table: StudyTable):
        super().__init__(message)
        self.table = table


def observed_rate(coarse: float | None, fine: float | None) -> float | None:
    if coarse is None or fine is None or coarse <= 0 or fine <= 0:
        return None
    return math.log2(coarse / fine)


def convergence_study(scheme: str, case: str, levels: int, lambdas, mu: float = 1.0,
                      base: str = "crisscross:4", seed: int = DEFAULT_SEED,
                      progress=None) -> StudyTable:
    """Solve on ``levels`` uniformly refined meshes for every lambda.

    Level 1 is the base mesh; each further level is one uniform refinement.
    Rates are ``log2(e_l / e_{l+1})`` per lambda.  A solver failure aborts
    with the rows gathered so far attached to the exception.
    """
    if levels < 1:
        raise ValueError("levels must be at least 1")
    cs = manufactured_case(case)
    table = StudyTable(scheme, cs.name, [], seed)
    mesh = mesh_from_spec(base)
    for level in range(1, levels + 1):
        disc = Discretization(mesh)
        for lam in lambdas:
            params = LameParams(mu, float(lam))
            try:
                sol = run_scheme(scheme, disc, params, cs.f)
            except Exception as exc:
                table.complete = False
                _fill_rates(table)
                raise StudyAborted(f"level {level}, lambda {lam:g}: {exc}", table) from exc
            table.rows.append(StudyRow(scheme, cs.name, level, mesh.h, sol.ndof, float(lam),
                                       error_norms(sol, cs)))
            if progress:
                progress(table.rows[-1])
        if level < levels:
            mesh = refine_uniform(mesh)
    _fill_rates(table)
    return table


def _fill_rates(table: StudyTable) -> None:
    for lam in table.lambdas():
        s = table.series(lam)
        for prev, cur in zip(s, s[1:]):
            cur.rates = {n: observed_rate(getattr(prev.errors, n), getattr(cur.errors, n)) for n in NORMS}


__all__ = [
    "CSV_HEADER", "ICR_PAIRS", "ErrorRecord", "PoincareReport", "SpectralReport", "StructureReport",
    "StudyAborted", "StudyRow", "StudyTable", "check_adjoint_matrix", "check_equivalence",
    "check_structure", "check_tr_dev_poincare", "compute_icr", "convergence_study", "error_norms",
    "exact_norms", "icr_inequality", "icr_sequence", "observed_rate", "perturbed_stress",
]
