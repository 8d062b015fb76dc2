import numpy as np
import pytest
import scipy.sparse as sp

from fleetplan import qp
from oracles import kkt_solve


def make_eq_qp(rng):
    n = int(rng.integers(2, 21))
    m = int(rng.integers(1, n + 1))
    M = rng.normal(size=(n, n))
    P = M.T @ M + 0.5 * np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    return qp.QpProblem(P, q, A, b, b)


def kkt_parity_check(n_problems=200, seed=123, tol=1e-6):
    """Random equality-constrained QPs vs the dense KKT factorization oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_problems):
        prob = make_eq_qp(rng)
        sol = qp.solve(prob, eps_abs=1e-8, eps_rel=1e-8)
        assert sol.status == "optimal"
        x_ref, _ = kkt_solve(prob.P.toarray(), prob.q, prob.A.toarray(), prob.l)
        err = np.max(np.abs(sol.x - x_ref)) / (1.0 + np.max(np.abs(x_ref)))
        assert err <= tol
        worst = max(worst, err)
    return worst


def test_unconstrained_identity():
    sol = qp.solve(qp.QpProblem(np.eye(3), np.zeros(3)))
    assert sol.status == "optimal"
    assert np.max(np.abs(sol.x)) < 1e-8


def test_clipped_scalar():
    # min (x-3)^2  s.t. x <= 1
    prob = qp.QpProblem([[2.0]], [-6.0], [[1.0]], [-np.inf], [1.0])
    sol = qp.solve(prob)
    assert sol.status == "optimal"
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


def test_box_projection():
    # min 1/2 ||x - c||^2  s.t. 0 <= x <= 1  ->  clip(c, 0, 1)
    c = np.array([2.0, -3.0, 0.5])
    prob = qp.QpProblem(np.eye(3), -c, sp.identity(3), np.zeros(3), np.ones(3))
    sol = qp.solve(prob)
    assert sol.status == "optimal"
    assert np.allclose(sol.x, [1.0, 0.0, 0.5], atol=1e-6)


def test_matches_kkt_oracle():
    kkt_parity_check(n_problems=60, seed=123)


def test_psd_rank_deficient_objective():
    # min 1/2 (x1 - x2)^2 - x1  s.t. -1 <= x <= 1; unique optimum (1, 1)
    P = np.array([[1.0, -1.0], [-1.0, 1.0]])
    prob = qp.QpProblem(P, [-1.0, 0.0], sp.identity(2), -np.ones(2), np.ones(2))
    sol = qp.solve(prob)
    assert sol.status == "optimal"
    assert np.allclose(sol.x, [1.0, 1.0], atol=1e-5)


def test_residual_contract():
    rng = np.random.default_rng(7)
    prob = make_eq_qp(rng)
    sol = qp.solve(prob)
    pr, du = qp.kkt_residuals(prob, sol.x, sol.y)
    assert pr == sol.primal_res and du == sol.dual_res
    assert pr <= 1e-6 + 1e-6 * 10  # abs + modest relative slack
    assert du <= 1e-4  # relative tolerance scales with problem data


def test_residual_perturbation():
    c = np.array([2.0, -3.0, 0.5])
    prob = qp.QpProblem(np.eye(3), -c, sp.identity(3), np.zeros(3), np.ones(3))
    sol = qp.solve(prob)
    x_bad = sol.x.copy()
    x_bad[0] += 1.0  # upper bound on coordinate 0 is active at the optimum
    pr, _ = qp.kkt_residuals(prob, x_bad, sol.y)
    assert pr >= 1.0 - 1e-6


def test_residuals_zero_problem():
    prob = qp.QpProblem(np.zeros((3, 3)), np.zeros(3))
    pr, du = qp.kkt_residuals(prob, np.array([4.0, -1.0, 9.0]), np.zeros(0))
    assert pr == 0.0 and du == 0.0


def test_deterministic_bit_identical():
    rng = np.random.default_rng(42)
    prob = make_eq_qp(rng)
    a = qp.solve(prob)
    b = qp.solve(prob)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.y, b.y)
    assert a.iterations == b.iterations


def test_objective_scaling_invariance():
    c = np.array([2.0, -3.0, 0.5, 0.25])
    A = sp.identity(4)
    base = qp.solve(qp.QpProblem(np.eye(4), -c, A, np.zeros(4), np.ones(4)))
    scaled = qp.solve(qp.QpProblem(37.5 * np.eye(4), -37.5 * c, A, np.zeros(4), np.ones(4)))
    assert np.max(np.abs(base.x - scaled.x)) <= 10 * 1e-6


def test_warm_start_reuses_iterates():
    rng = np.random.default_rng(5)
    prob = make_eq_qp(rng)
    cold = qp.solve(prob)
    warm = qp.solve(prob, warm=cold)
    assert warm.status == "optimal"
    assert warm.iterations <= cold.iterations
    assert np.max(np.abs(warm.x - cold.x)) < 1e-5


def test_primal_infeasible_detected():
    # x <= -1 and x >= 1 cannot both hold
    prob = qp.QpProblem([[1.0]], [0.0], [[1.0], [1.0]], [-np.inf, 1.0], [-1.0, np.inf])
    sol = qp.solve(prob)
    assert sol.status == "primal_infeasible"


def test_max_iters_reports_best_iterate():
    rng = np.random.default_rng(11)
    prob = make_eq_qp(rng)
    sol = qp.solve(prob, max_iters=10, check_every=5)
    assert sol.status in ("max_iters", "optimal")
    if sol.status == "max_iters":
        assert sol.x.shape == (prob.n,)
        assert np.isfinite(sol.primal_res) and np.isfinite(sol.dual_res)


def test_rejects_bad_problems():
    with pytest.raises(ValueError):
        qp.QpProblem(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        qp.QpProblem([[1.0, 0.5], [0.0, 1.0]], np.zeros(2))
    with pytest.raises(ValueError):
        qp.QpProblem(np.eye(1), np.zeros(1), [[1.0]], [2.0], [1.0])
