import numpy as np
import pytest

from otproto import core, sinkhorn
from otproto.errors import NonFiniteError, NumericOverflowError

import oracles


def solve_converged(m, epsilon, max_iters=20000, tol=1e-6, log_domain=True):
    params = sinkhorn.SolverParams(
        epsilon=epsilon, max_iters=max_iters, marginal_tol=tol, log_domain=log_domain
    )
    plan = sinkhorn.solve(m, params)
    assert plan.converged
    return plan


def test_zero_cost_gives_product_plan():
    plan = solve_converged(np.zeros((3, 5)), epsilon=0.3)
    want = np.full((3, 5), 1.0 / 15.0)
    assert np.max(np.abs(plan.matrix - want)) < 1e-12


def test_two_by_two_antidiagonal_cost():
    plan = solve_converged(np.array([[0.0, 1.0], [1.0, 0.0]]), epsilon=0.01)
    assert plan.matrix[0, 0] == pytest.approx(0.5, abs=1e-9)
    assert plan.matrix[1, 1] == pytest.approx(0.5, abs=1e-9)
    # off-diagonal mass is exp(-1/epsilon)-suppressed, numerically nil
    assert plan.matrix[0, 1] < 1e-20 and plan.matrix[1, 0] < 1e-20


def test_five_by_five_against_permutation_oracle():
    rng = np.random.default_rng(0)
    m = rng.uniform(0.0, 1.0, size=(5, 5))
    plan = solve_converged(m, epsilon=0.01)
    got = sinkhorn.transport_cost(m, plan)
    exact = oracles.exact_ot_square(m.tolist())
    assert got >= exact - 1e-9
    assert got - exact <= 0.01 * np.log(25.0) + 1e-3


def test_exact_oracle_agreement_small_sizes():
    rng = np.random.default_rng(1)
    for k in (2, 3, 4, 6):
        m = rng.uniform(0.0, 1.0, size=(k, k))
        plan = solve_converged(m, epsilon=0.05)
        got = sinkhorn.transport_cost(m, plan)
        exact = oracles.exact_ot_square(m.tolist())
        assert exact - 1e-9 <= got <= exact + 0.05 * np.log(k * k) + 1e-3


def test_marginal_residuals_product_plan():
    plan = core.TransportPlan(
        matrix=np.full((4, 2), 1.0 / 8.0),
        row_mass=0.25, col_mass=0.5, epsilon=1.0, iterations=0, converged=True,
    )
    assert sinkhorn.marginal_residuals(plan) == (0.0, 0.0)


def test_marginal_residuals_detect_perturbation():
    delta = 1e-3
    matrix = np.full((4, 2), 1.0 / 8.0)
    matrix[2, 1] += delta
    plan = core.TransportPlan(
        matrix=matrix, row_mass=0.25, col_mass=0.5, epsilon=1.0, iterations=0, converged=False,
    )
    row, col = sinkhorn.marginal_residuals(plan)
    assert row == pytest.approx(delta, abs=1e-15)
    assert col == pytest.approx(delta, abs=1e-15)


def test_converged_solve_meets_tolerance():
    rng = np.random.default_rng(2)
    for _ in range(10):
        m = rng.uniform(0, 1, size=(rng.integers(2, 8), rng.integers(2, 8)))
        plan = solve_converged(m, epsilon=0.1)
        row, col = sinkhorn.marginal_residuals(plan)
        assert row <= 1e-6 and col <= 1e-6
        assert plan.matrix.min() >= 0.0
        assert plan.total_mass == pytest.approx(1.0, abs=2e-6)


@pytest.mark.parametrize("epsilon", [1.0, 0.1, 0.01])
def test_log_and_direct_modes_agree(epsilon):
    rng = np.random.default_rng(3)
    m = rng.uniform(0, 1, size=(6, 4))
    log_plan = solve_converged(m, epsilon=epsilon, log_domain=True)
    direct_plan = solve_converged(m, epsilon=epsilon, log_domain=False)
    assert np.max(np.abs(log_plan.matrix - direct_plan.matrix)) < 1e-6


def test_row_permutation_equivariance():
    rng = np.random.default_rng(4)
    m = rng.uniform(0, 1, size=(6, 6))
    perm = rng.permutation(6)
    base = solve_converged(m, epsilon=0.1).matrix
    permuted = solve_converged(m[perm], epsilon=0.1).matrix
    assert np.max(np.abs(permuted - base[perm])) < 1e-9


def test_transport_cost_monotone_in_epsilon():
    rng = np.random.default_rng(5)
    m = rng.uniform(0, 1, size=(5, 5))
    costs = [
        sinkhorn.transport_cost(m, solve_converged(m, epsilon=eps))
        for eps in (1.0, 0.1, 0.01)
    ]
    assert costs[0] >= costs[1] - 1e-9
    assert costs[1] >= costs[2] - 1e-9


def test_plan_nonnegative_even_when_not_converged():
    rng = np.random.default_rng(6)
    m = rng.uniform(0, 1, size=(30, 20))
    params = sinkhorn.SolverParams(epsilon=0.01, max_iters=3)
    plan = sinkhorn.solve(m, params)
    assert not plan.converged
    assert plan.iterations == 3
    assert plan.matrix.min() >= 0.0


def test_columns_exact_after_any_solve():
    # iterations end on the column scaling, so column sums are exact even
    # for non-converged plans; the EMA update relies on this.
    rng = np.random.default_rng(7)
    m = rng.uniform(0, 1, size=(12, 6))
    plan = sinkhorn.solve(m, sinkhorn.SolverParams(epsilon=0.01, max_iters=2))
    _, col = sinkhorn.marginal_residuals(plan)
    assert col < 1e-15


def test_direct_mode_underflow_raises():
    # one row where every kernel entry exp(-M/eps) underflows to 0
    m = np.array([[1.0, 1.0], [0.0, 0.0]])
    params = sinkhorn.SolverParams(epsilon=1e-4, max_iters=10, log_domain=False)
    with pytest.raises(NumericOverflowError):
        sinkhorn.solve(m, params)
    # the log-domain path handles the same instance
    plan = sinkhorn.solve(m, sinkhorn.SolverParams(epsilon=1e-4, max_iters=200))
    assert np.isfinite(plan.matrix).all()


def test_non_finite_cost_rejected():
    m = np.array([[0.0, np.nan], [1.0, 0.0]])
    with pytest.raises(NonFiniteError):
        sinkhorn.solve(m)


def test_solver_params_validation():
    with pytest.raises(Exception):
        sinkhorn.SolverParams(epsilon=0.0)
    with pytest.raises(Exception):
        sinkhorn.SolverParams(max_iters=0)
