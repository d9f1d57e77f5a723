import numpy as np
import pytest

from hrfem.elasticity import LameParams, elasticity_apply, manufactured_case, zero_load
from hrfem.local_fe import VECTOR_SPACES, matrix_to_voigt
from hrfem.schemes import (
    SCHEMES,
    DiscreteSolution,
    _p0_average,
    evaluate,
    nl_min_residual,
    rigid_projected_load,
    run_scheme,
    solve_hr,
    solve_hr_min,
    solve_ks_primal,
    solve_ks_reduced,
    solve_nl_min,
    solve_stressred,
    transfer_primal_to_mixed,
)
from hrfem.spaces import GROUP_BOUNDARY_VERTEX, ks_to_p1_modes
from hrfem.verify import check_equivalence, convergence_study

RATE_BAND = (0.85, 1.15)


def _in_band(rate):
    return RATE_BAND[0] <= rate <= RATE_BAND[1]


def _strain_stress(disc, coeffs, params):
    p1 = ks_to_p1_modes(disc.geom, disc.ks.local_coefficients(coeffs))
    g = np.einsum("kij,nk->nij", VECTOR_SPACES["p1"][1], p1)
    return matrix_to_voigt(elasticity_apply(0.5 * (g + np.swapaxes(g, -1, -2)), params))


# -- trivial solutions --------------------------------------------------------------------

@pytest.mark.parametrize("scheme", SCHEMES)
def test_zero_load_gives_zero_solution(disc2, scheme):
    sol = run_scheme(scheme, disc2, LameParams(1.0, 1e4), zero_load)
    assert np.all(sol.u == 0)
    assert np.all(sol.sigma == 0)
    pts = np.array([[0.3, 0.3], [0.9, 0.1]])
    assert np.all(evaluate(sol, pts, "sigma") == 0)


def test_unknown_scheme(disc1):
    with pytest.raises(ValueError):
        run_scheme("dg", disc1, LameParams(), zero_load)


def test_rigid_displacement_at_centroid_is_constant_part(disc2):
    sol = solve_hr(disc2, LameParams(), manufactured_case("trig_generic").f)
    c = disc2.mesh.centroids[5]
    assert np.allclose(evaluate(sol, c, "u")[0], sol.u[5, :2])


def test_single_cell_basis_vanishes_outside_support(disc2):
    st_ = disc2.stress
    j = int(np.flatnonzero(st_.group == GROUP_BOUNDARY_VERTEX)[0])
    (cell, _), = st_.function(j)
    e = np.zeros(st_.dim)
    e[j] = 1.0
    sol = DiscreteSolution("basis", disc2.mesh, LameParams(), st_.mode_coefficients(e), "rigid",
                           np.zeros((disc2.mesh.nt, 3)), st_.dim)
    others = np.delete(disc2.mesh.centroids, cell, axis=0)
    assert np.all(evaluate(sol, others, "sigma") == 0)
    assert np.abs(evaluate(sol, disc2.mesh.centroids[cell], "sigma")).max() > 0


def test_evaluate_outside_domain(disc1):
    sol = solve_hr(disc1, LameParams(), zero_load)
    with pytest.raises(ValueError):
        evaluate(sol, [[1.5, 0.5]], "u")


# -- mixed scheme post-conditions -------------------------------------------------------------

def test_hr_post_conditions(disc2):
    sol = solve_hr(disc2, LameParams(1.0, 1e6), manufactured_case("divfree_locking").f)
    assert abs(sol.checks["integral_trace"]) <= 1e-9 * sol.checks["sigma_norm"]
    assert sol.checks["projected_equilibrium"] <= 1e-9
    assert sol.ndof == disc2.stress.dim + 3 * disc2.mesh.nt


def test_hr_with_piecewise_rigid_load_has_exact_divergence(disc2):
    coef = np.random.default_rng(10).standard_normal((disc2.mesh.nt, 3))
    _, f_h = rigid_projected_load(disc2, lambda x, p: np.zeros(x.shape), LameParams())
    centroid = disc2.geom.centroid

    def load(x, _p):
        return np.einsum("nqkd,nk->nqd", VECTOR_SPACES["rigid"][0]
                         + np.einsum("kij,nqj->nqki", VECTOR_SPACES["rigid"][1], x - centroid[:, None]), coef)

    sol = solve_hr(disc2, LameParams(1.0, 10.0), load)
    pts = centroid + 0.05
    got = np.array([sol.eval_cells("div_sigma", np.array([t]), pts[t:t + 1])[0] for t in range(disc2.mesh.nt)])
    want = load(pts[:, None, :], None)[:, 0, :]
    assert np.allclose(got, want, atol=1e-10 * np.abs(want).max())


def test_hr_min_post_conditions(disc2):
    sol = solve_hr_min(disc2, LameParams(1.0, 1e4), manufactured_case("trig_generic").f)
    assert sol.checks["q_mode"] <= 1e-9
    assert sol.checks["projected_equilibrium"] <= 1e-9
    assert np.allclose(sol.sigma[:, 5], 0, atol=1e-10 * np.abs(sol.sigma).max())


def test_nl_min_recovery_identities(disc2):
    p = LameParams(1.0, 100.0)
    sol = solve_nl_min(disc2, p, manufactured_case("trig_generic").f)
    assert sol.checks["primal_residual"] <= 1e-8
    aux = disc2.stress.mode_coefficients(sol.coefficients["aux_sigma"])
    # C eps_h(u_eps) = P0 sigma_aux
    cells = np.arange(disc2.mesh.nt)
    eps = sol.eval_cells("eps_u", cells, disc2.mesh.centroids)
    assert np.allclose(matrix_to_voigt(elasticity_apply(eps, p)), _p0_average(disc2.geom, aux), rtol=1e-10, atol=1e-10)
    # P0 u_eps = u_aux (linear modes have zero mean)
    assert np.allclose(sol.u[:, :2], sol.coefficients["aux_u"].reshape(-1, 2))
    assert nl_min_residual(disc2, sol, manufactured_case("trig_generic").f) <= 1e-8


def test_ks_stress_is_elastic_response(disc2):
    p = LameParams(2.0, 3.0)
    sol = solve_ks_primal(disc2, p, manufactured_case("trig_generic").f)
    assert np.allclose(sol.sigma[:, :3], _strain_stress(disc2, sol.coefficients["u"], p))
    assert np.all(sol.sigma[:, 3:] == 0)


# -- equivalence of the primal and projected mixed problems ------------------------------------

@pytest.mark.parametrize("spec", ["cc1", "cc2"])
@pytest.mark.parametrize("lam", [1.0, 1e4])
def test_equivalence_transfer(spec, lam, request):
    mesh = request.getfixturevalue(spec)
    res = check_equivalence(mesh, LameParams(1.0, lam), "trig_generic")
    assert res["stress_mismatch"] <= 1e-8
    assert res["div_minus_fh"] <= 1e-9
    assert res["p0_rbar_minus_p0_r"] <= 1e-9
    assert res["r_bar_mismatch"] <= 1e-8


def test_transfer_sign_follows_the_derivation(disc2):
    """The cell average of the transferred stress is ``-C eps(r)`` for the literal
    reduced primal problem, not ``+C eps(r)``."""
    p = LameParams(1.0, 10.0)
    coef, f_h = rigid_projected_load(disc2, manufactured_case("trig_generic").f, p)
    r = solve_ks_reduced(disc2, p, f_h)
    tr = transfer_primal_to_mixed(disc2, p, r, coef)
    avg = _p0_average(disc2.geom, tr.zeta_modes)
    c_eps = _strain_stress(disc2, r, p)
    scale = np.abs(avg).max()
    assert np.abs(avg + c_eps).max() <= 1e-9 * scale
    assert np.abs(avg - c_eps).max() > 0.5 * scale


def test_transfer_matches_physically_signed_primal_solve(disc2):
    # with the load -(f_h, v) the KS displacement is -r, so P0 zeta = C eps(u_KS)
    p = LameParams(1.0, 1e4)
    coef, f_h = rigid_projected_load(disc2, manufactured_case("divfree_locking").f, p)
    modes, _, _ = solve_stressred(disc2, p, coef)
    ks = solve_ks_primal(disc2, p, f_h)
    avg = _p0_average(disc2.geom, modes)
    assert np.allclose(avg, ks.sigma[:, :3], rtol=0, atol=1e-9 * np.abs(avg).max())


def test_rbar_is_rigid_projection_of_r(disc2):
    p = LameParams(1.0, 1.0)
    coef, f_h = rigid_projected_load(disc2, manufactured_case("trig_generic").f, p)
    r = solve_ks_reduced(disc2, p, f_h)
    tr = transfer_primal_to_mixed(disc2, p, r, coef)
    _, _, r_bar = solve_stressred(disc2, p, coef)
    assert np.allclose(tr.r_bar, r_bar, atol=1e-9 * np.abs(r_bar).max())


# -- rates on two levels (crisscross:4 and one refinement) -----------------------------------

def test_hr_divfree_stress_rate_at_large_lambda():
    # [PAPER] first-order stress convergence with lambda-free constant
    t = convergence_study("hr", "divfree_locking", 2, [1e6])
    assert _in_band(t.finest_rate("sigma", 1e6))


def test_hr_trig_divergence_rate():
    t = convergence_study("hr", "trig_generic", 2, [1.0])
    assert _in_band(t.finest_rate("div", 1.0))


def test_ks_trig_broken_energy_rate():
    t = convergence_study("ks", "trig_generic", 2, [1.0])
    assert _in_band(t.finest_rate("energy", 1.0))


def test_ks_divfree_energy_is_lambda_robust():
    t = convergence_study("ks", "divfree_locking", 2, [1.0, 1e2, 1e4, 1e6])
    assert t.robustness("energy") <= 1.2


def test_hr_min_rates():
    t = convergence_study("hr-min", "trig_generic", 2, [1.0])
    assert _in_band(t.finest_rate("div", 1.0))
    t = convergence_study("hr-min", "divfree_locking", 2, [1e6])
    assert _in_band(t.finest_rate("sigma", 1e6))


def test_nl_min_strain_rate():
    t = convergence_study("nl-min", "trig_generic", 2, [1.0])
    assert _in_band(t.finest_rate("energy", 1.0))
