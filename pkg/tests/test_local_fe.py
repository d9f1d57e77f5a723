import numpy as np
import pytest
import sympy as sp
from hypothesis import assume, given, settings, strategies as st

from hrfem.local_fe import (
    DUAL_TOL,
    N_STRESS,
    Q_MODE,
    CellGeometry,
    DegenerateCellError,
    dual_coefficients,
    local_dual_basis,
    local_kernel_range_check,
    local_pairing_matrix,
    pairing_matrices,
    stress_modes,
    sym_voigt,
)
from hrfem.mesh import Mesh
from hrfem.spaces import mode_vector_pairing

REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


# -- symbolic oracle on the reference triangle [DERIVED] -------------------------

X, Y = sp.symbols("x y")
XI, ETA = X - sp.Rational(1, 3), Y - sp.Rational(1, 3)


def _sym_modes():
    q = XI**2 - ETA**2
    return [
        sp.Matrix([[1, 0], [0, 0]]),
        sp.Matrix([[0, 1], [1, 0]]),
        sp.Matrix([[0, 0], [0, 1]]),
        sp.Matrix([[0, XI], [XI, 0]]),
        sp.Matrix([[0, ETA], [ETA, 0]]),
        sp.Matrix([[0, q], [q, 0]]),
    ]


def _sym_tests():
    lam = [1 - X - Y, X, Y]
    return [sp.Matrix([l, 0]) for l in lam] + [sp.Matrix([0, 1 - 2 * l]) for l in lam]


def _sym_div(t):
    return sp.Matrix([sp.diff(t[0, 0], X) + sp.diff(t[0, 1], Y),
                      sp.diff(t[1, 0], X) + sp.diff(t[1, 1], Y)])


def _sym_grad(v):
    return sp.Matrix([[sp.diff(v[i], X), sp.diff(v[i], Y)] for i in range(2)])


def _integrate_ref(expr):
    return sp.integrate(sp.integrate(sp.expand(expr), (Y, 0, 1 - X)), (X, 0, 1))


@pytest.fixture(scope="module")
def symbolic_pairing():
    modes, tests = _sym_modes(), _sym_tests()
    M = sp.zeros(6, 6)
    for r, t in enumerate(modes):
        d = _sym_div(t)
        for s, v in enumerate(tests):
            g = _sym_grad(v)
            M[r, s] = _integrate_ref(d.dot(v) + sum(t[i, j] * g[i, j] for i in range(2) for j in range(2)))
    return M


def test_pairing_matrix_matches_symbolic_oracle(symbolic_pairing):
    M = pairing_matrices(CellGeometry.from_points(REF))[0]
    exact = np.array(symbolic_pairing.evalf(), dtype=float)
    assert np.allclose(M, exact, rtol=0, atol=1e-14)


def test_x_mode_against_cr_function(symbolic_pairing):
    # X = (0, xi; xi, 0) with the CR function of edge 0 in component 2
    M = pairing_matrices(CellGeometry.from_points(REF))[0]
    assert M[3, 3] == pytest.approx(float(symbolic_pairing[3, 3]), abs=1e-15)


def test_reference_pairing_rank(symbolic_pairing):
    assert symbolic_pairing.rank() == 6
    assert np.linalg.matrix_rank(pairing_matrices(CellGeometry.from_points(REF))[0]) == 6


def test_constant_modes_against_constant_fields():
    P = mode_vector_pairing(CellGeometry.from_points(REF), "p0")[0]
    assert np.all(P[:3] == 0.0)


# -- dual basis ---------------------------------------------------------------------

def test_duality_on_every_cell(cc2):
    geom = CellGeometry.from_mesh(cc2)
    M = pairing_matrices(geom)
    C = dual_coefficients(geom, M)
    for n in range(cc2.nt):
        assert np.allclose(M[n].T @ C[n], np.eye(6), rtol=0, atol=DUAL_TOL)


def test_local_dual_basis_object(cc1):
    b = local_dual_basis(cc1, 2)
    M = local_pairing_matrix(cc1, 2)
    assert b.pairing_residual(M) <= DUAL_TOL
    # vertex dual against its own hat is one, against an edge test zero
    pair = M.T @ b.dual
    assert pair[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert abs(pair[3, 0]) <= 1e-12


def test_degenerate_cell_rejected():
    with pytest.raises(DegenerateCellError):
        CellGeometry.from_points(np.array([[0, 0], [1, 0], [2, 0.0]]))


# -- mode divergences [DERIVED: symbolic differentiation] -----------------------------

def test_mode_divergences_match_sympy():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(7, 2))
    _, div = stress_modes(pts[:, 0], pts[:, 1])
    xi, eta = sp.symbols("xi eta")
    q = xi**2 - eta**2
    modes = [sp.Matrix([[1, 0], [0, 0]]), sp.Matrix([[0, 1], [1, 0]]), sp.Matrix([[0, 0], [0, 1]]),
             sp.Matrix([[0, xi], [xi, 0]]), sp.Matrix([[0, eta], [eta, 0]]), sp.Matrix([[0, q], [q, 0]])]
    for r, t in enumerate(modes):
        d = [sp.diff(t[i, 0], xi) + sp.diff(t[i, 1], eta) for i in range(2)]
        f = sp.lambdify((xi, eta), d)
        for p, got in zip(pts, div[:, r]):
            assert np.allclose(got, np.array(f(*p), dtype=float), atol=1e-15)


def test_q_mode_divergence_is_rotation():
    xi, eta = np.array([0.3]), np.array([-0.2])
    _, div = stress_modes(xi, eta)
    assert np.allclose(div[0, Q_MODE], [-2 * eta[0], 2 * xi[0]])


def test_strain_of_swap_field_is_off_diagonal_mode():
    # v = (y, x): grad = [[0, 1], [1, 0]]
    assert np.allclose(sym_voigt(np.array([[0.0, 1.0], [1.0, 0.0]])), [0.0, 1.0, 0.0])


# -- kernel / range identities --------------------------------------------------------

def test_kernel_range_identities_every_cell(cc2):
    for t in range(cc2.nt):
        rep = local_kernel_range_check(cc2, t)
        assert rep.dims == {
            "ker_div_sigma_mplus": 3, "range_div_sigma_mplus": 3, "ker_eps_p1": 3,
            "range_div_sigma_m": 2, "ker_eps_veps": 2,
        }
        assert rep.max_defect <= 1e-10


# -- properties on random affine cells ----------------------------------------------

coord = st.floats(-3.0, 3.0, allow_nan=False)


def _cell(vals):
    p = np.array(vals, dtype=float).reshape(3, 2)
    d1, d2 = p[1] - p[0], p[2] - p[0]
    det = d1[0] * d2[1] - d1[1] * d2[0]
    longest = max(np.sum(d1**2), np.sum(d2**2), np.sum((p[2] - p[1]) ** 2))
    assume(abs(det) > 0.05 * longest and longest > 1e-2)
    return p if det > 0 else p[[0, 2, 1]]


@settings(max_examples=60, deadline=None)
@given(st.lists(coord, min_size=6, max_size=6))
def test_dual_identity_on_random_cells(vals):
    geom = CellGeometry.from_points(_cell(vals))
    M = pairing_matrices(geom)
    C = dual_coefficients(geom, M)
    assert np.abs(M[0].T @ C[0] - np.eye(N_STRESS)).max() <= DUAL_TOL


@settings(max_examples=40, deadline=None)
@given(st.lists(coord, min_size=6, max_size=6), st.floats(1e-3, 1e3), st.tuples(coord, coord))
def test_pairing_scaling_and_translation(vals, s, shift):
    p = _cell(vals)
    base = pairing_matrices(CellGeometry.from_points(p))[0]
    moved = pairing_matrices(CellGeometry.from_points(s * p + np.array(shift)))[0]
    # centroid-shifted modes: constants scale like s, linear modes like s^2, Q like s^3
    scale = np.array([s, s, s, s**2, s**2, s**3])[:, None]
    assert np.allclose(moved, scale * base, rtol=1e-9, atol=1e-12 * np.abs(scale * base).max())
    C = dual_coefficients(CellGeometry.from_points(s * p))
    assert np.abs(np.swapaxes(pairing_matrices(CellGeometry.from_points(s * p)), 1, 2) @ C
                  - np.eye(6)).max() <= DUAL_TOL


@settings(max_examples=30, deadline=None)
@given(st.lists(coord, min_size=6, max_size=6))
def test_kernel_range_on_random_cells(vals):
    p = _cell(vals)
    # a one-cell mesh is enough for the local check
    mesh = Mesh(p, np.array([[0, 1, 2]]), check_connectivity=False)
    rep = local_kernel_range_check(mesh, 0)
    assert rep.max_defect <= 1e-10
    assert rep.dims["range_div_sigma_m"] == 2
