import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from conftest import TRUTH, make_dataset, noise_free_dataset, random_small_dataset
from reference import ref_g1, ref_g2
from recurgap.estimate import (
    EstimatingContext,
    GapClass,
    SolverOptions,
    admissible_rho,
    classify,
    classify_times,
    default_init,
    fit,
    g1_hat,
    g1_jacobian_fd,
    g2_hat,
    sigma2_closed_form,
    sigma2_coefficients,
    solve_theta,
)
from recurgap.exceptions import ContractError, DegenerateDataError, EvaluationError
from recurgap.model import MurphyModel, Parameters
from recurgap.simulate import Dataset, SimConfig, SubjectPath, read_tidy, simulate_dataset, write_tidy

O, C, X = GapClass.OBS, GapClass.CEN, GapClass.OUT


# -- classification ---------------------------------------------------------


def test_classify_times_examples():
    assert classify_times([10, 25, 40], 30) == (O, O, C)
    assert classify_times([10], 5) == (C,)
    assert classify_times([10, 30, 40], 30) == (O, O, X)


def test_classify_dataset():
    ds = make_dataset([[10, 25, 40], [10, 30, 45]], 30)
    assert classify(ds) == [(O, O, C), (O, O)]
    assert ds.subjects[1].final_gap_censored is False


def test_partition_on_simulated(sim_small):
    _, ds = sim_small
    for s, cls in zip(ds.subjects, classify(ds)):
        assert len(cls) == s.tau
        assert cls.count(C) == 1 and cls[-1] == C
        assert set(cls[:-1]) <= {O}


# -- g1 / g2 against the loop reference ---------------------------------------


def test_g1_single_subject_hand_example():
    # offset 0, theta=(1, 0, 0): mu = 1, V = 1. Observed Y1 = 3 so Z1 = 2;
    # the censored gap at j=2 has no observed partner, so its term is zero.
    ds = make_dataset([[3.0, 9.0]], 5.0)
    m = MurphyModel(0.0)
    np.testing.assert_allclose(g1_hat(ds, m, [1.0, 0.0, 0.0]), [2.0, 0.0, 0.0], atol=1e-14)
    assert g2_hat(ds, m, [1.0, 0.0, 0.0], 1.5) == pytest.approx(4.0 - 1.5, abs=1e-14)


def test_g1_zero_when_all_residuals_vanish():
    cfg = SimConfig(n=10, c_max=125, params=TRUTH.replace(sigma2=0.0), seed=2)
    ds = simulate_dataset(cfg)
    np.testing.assert_allclose(g1_hat(ds, cfg.model, TRUTH), 0.0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_g_match_reference_small(seed, symmetric):
    rng = np.random.default_rng(seed)
    ds = random_small_dataset(rng, n_max=4, m_max=3)
    m = MurphyModel(0.0)
    th = np.array([rng.uniform(2, 5), rng.uniform(-1, 1), rng.uniform(0.01, 0.5)])
    s2 = rng.uniform(0.1, 3)
    np.testing.assert_allclose(g1_hat(ds, m, th), ref_g1(ds, m, th), rtol=1e-10, atol=1e-10)
    assert g2_hat(ds, m, th, s2, symmetric) == pytest.approx(ref_g2(ds, m, th, s2, symmetric), rel=1e-10, abs=1e-10)


def test_g_match_reference_simulated(sim_small):
    cfg, ds = sim_small
    th = np.array([0.3, -0.1, 0.1])
    np.testing.assert_allclose(g1_hat(ds, cfg.model, th), ref_g1(ds, cfg.model, th), rtol=1e-10)
    assert g2_hat(ds, cfg.model, th, 9.0) == pytest.approx(ref_g2(ds, cfg.model, th, 9.0), rel=1e-10)


def test_g2_leave_self_out_differs_from_symmetric():
    ds = make_dataset([[3.0, 12.0], [4.0, 11.0], [2.0, 5.0, 13.0]], 10.0)
    m = MurphyModel(0.0)
    th = [3.0, 0.0, 0.1]
    assert g2_hat(ds, m, th, 1.0) != pytest.approx(g2_hat(ds, m, th, 1.0, symmetric=True))


def test_g2_single_subject_drops_censored_term():
    ds = make_dataset([[3.0, 5.0, 20.0]], 10.0)
    m = MurphyModel(0.0)
    ctx = EstimatingContext(ds, m, [1.0, 0.0, 0.0])
    z = ctx.Z[0, :2]
    assert g2_hat(ds, m, [1.0, 0.0, 0.0], 0.7) == pytest.approx(float(np.sum(z**2 - 0.7)), rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 20), st.floats(0, 20))
def test_g2_affine_in_sigma2(seed, a, s1, s2):
    ds = random_small_dataset(np.random.default_rng(seed), n_max=4, m_max=3)
    m = MurphyModel(0.0)
    th = [3.0, 0.2, 0.1]
    lhs = g2_hat(ds, m, th, a * s1 + (1 - a) * s2)
    rhs = a * g2_hat(ds, m, th, s1) + (1 - a) * g2_hat(ds, m, th, s2)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_permutation_invariance(sim_small):
    cfg, ds = sim_small
    perm = Dataset(tuple(reversed(ds.subjects[::2] + ds.subjects[1::2])))
    th = TRUTH
    np.testing.assert_allclose(g1_hat(perm, cfg.model, th), g1_hat(ds, cfg.model, th), rtol=1e-12, atol=1e-9)
    assert g2_hat(perm, cfg.model, th) == pytest.approx(g2_hat(ds, cfg.model, th), rel=1e-12)


def test_evaluation_error_carries_index():
    # rho = -1/(j-1) makes 1 + f_j = 0 and V_j = 0 at j = 3
    ds = make_dataset([[3.0, 6.0, 20.0]], 10.0)
    with pytest.raises(EvaluationError) as e:
        g1_hat(ds, MurphyModel(0.0), [1.0, 0.0, -0.5])
    assert e.value.index == (0, 2)


def test_empty_dataset():
    with pytest.raises(ContractError):
        g1_hat(Dataset(()), MurphyModel(), [0, 0, 0.1])
    with pytest.raises(ContractError):
        fit(Dataset(()), MurphyModel())


# -- Jacobian ---------------------------------------------------------------


def test_analytic_jacobian_matches_fd(sim_small):
    cfg, ds = sim_small
    rng = np.random.default_rng(3)
    for _ in range(10):
        th = TRUTH.theta + rng.normal(0, [0.5, 0.5, 0.05])
        th[2] = abs(th[2]) + 0.01
        J = EstimatingContext(ds, cfg.model, th, hessian=True).g1_jacobian()
        np.testing.assert_allclose(J, g1_jacobian_fd(ds, cfg.model, th), rtol=1e-5, atol=1e-5 * np.abs(J).max())


# -- sigma^2 closed form -------------------------------------------------------


def test_sigma2_constant_residuals():
    # all gaps observed with Z^2 = c: only possible with tau = 1 subjects all uncensored
    ds = Dataset(tuple(SubjectPath(i + 1, [5.0 + (-1) ** i * 2.0], [0.0], 7.0 + (-1) ** i * 2.0, False) for i in range(4)))
    assert sigma2_closed_form(ds, MurphyModel(0.0), [5.0, 0.0, 0.1]) == pytest.approx(4.0 * (1 - 0.1), rel=1e-12)


def test_sigma2_matches_bisection_hand_dataset():
    ds = make_dataset([[4.0, 13.0], [6.0, 12.0], [3.0, 15.0]], 10.0)
    m = MurphyModel(0.0)
    th = [4.0, 0.3, 0.2]
    s2 = sigma2_closed_form(ds, m, th)
    root = optimize.bisect(lambda s: g2_hat(ds, m, th, s), 1e-9, 1e3, xtol=1e-14, rtol=1e-15, maxiter=500)
    assert s2 == pytest.approx(root, abs=1e-10)


def test_sigma2_degenerate():
    ds = make_dataset([[12.0], [15.0]], 10.0)
    with pytest.raises(DegenerateDataError):
        sigma2_closed_form(ds, MurphyModel(0.0), [4.0, 0.0, 0.1])
    A, B = sigma2_coefficients(ds, MurphyModel(0.0), [4.0, 0.0, 0.1])
    assert B == 0.0


# -- solving ----------------------------------------------------------------


def test_noise_free_recovery():
    ds = noise_free_dataset()
    m = MurphyModel(28.0)
    np.testing.assert_allclose(g1_hat(ds, m, TRUTH), 0.0, atol=1e-9)
    init = Parameters(1.2, -0.1, 0.08)
    res = fit(ds, m, init=init)
    assert res.converged
    np.testing.assert_allclose(res.theta_hat.theta, TRUTH.theta, atol=1e-6)


def test_init_at_truth_converges_fast():
    cfg = SimConfig(n=400, c_max=225, seed=5)
    ds = simulate_dataset(cfg)
    sol = solve_theta(ds, cfg.model, TRUTH)
    assert sol.converged and sol.iterations <= 5


def test_newton_converges_quadratically():
    cfg = SimConfig(n=200, c_max=225, seed=8)
    ds = simulate_dataset(cfg)
    root = solve_theta(ds, cfg.model, TRUTH, SolverOptions(tol=1e-12)).theta
    errs = []
    th = TRUTH.theta + np.array([0.2, -0.2, 0.01])
    for it in range(6):
        sol = solve_theta(ds, cfg.model, th, SolverOptions(max_iter=it, tol=0.0))
        errs.append(np.max(np.abs(sol.theta - root)))
    # e_{k+1} <= K e_k^2 once close
    for k in (2, 3):
        assert errs[k + 1] <= 10 * errs[k] ** 2
    assert errs[5] < 1e-12


def test_root_contract(sim_small):
    cfg, ds = sim_small
    res = fit(ds, cfg.model)
    assert res.converged
    assert np.max(np.abs(g1_hat(ds, cfg.model, res.theta_hat))) <= 1e-8 * ds.n
    assert abs(g2_hat(ds, cfg.model, res.theta_hat.theta, res.sigma2_hat)) <= 1e-10 * ds.n
    assert res.method == "np"
    assert np.all(np.isfinite(res.ase)) and res.diagnostics.ok


def test_fit_from_disk_is_identical(sim_small, tmp_path):
    cfg, ds = sim_small
    write_tidy(ds, tmp_path / "d.csv")
    a, b = fit(ds, cfg.model), fit(read_tidy(tmp_path / "d.csv"), cfg.model)
    np.testing.assert_allclose(a.estimates, b.estimates, rtol=1e-10)


def test_rho_bounds_respected():
    cfg = SimConfig(n=50, c_max=125, seed=1)
    ds = simulate_dataset(cfg, rep=3)
    lo, hi = admissible_rho(ds, SolverOptions())
    assert lo == pytest.approx(-0.99 / (ds.max_events - 1)) and hi == 1 - 1e-6
    sol = solve_theta(ds, cfg.model, TRUTH, SolverOptions(rho_bounds=(1e-6, 1 - 1e-6)))
    assert 1e-6 <= sol.theta[2] <= 1 - 1e-6


def test_default_init_is_admissible(sim_small):
    cfg, ds = sim_small
    init = default_init(ds, cfg.model)
    assert abs(init.gamma0 - TRUTH.gamma0) < 3 and init.rho == 0.05 and init.sigma2 > 0


def test_report_lines(sim_small):
    cfg, ds = sim_small
    lines = fit(ds, cfg.model).report_lines()
    keys = [l.split("=", 1)[0] for l in lines]
    for k in ("method", "converged", "gamma0", "ase_sigma2", "g1_residual_norm", "regularity_ok"):
        assert k in keys
    assert all("np.float64" not in l for l in lines)
