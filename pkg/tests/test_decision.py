import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffdfl import tasks
from diffdfl.decision import (AffineConstraints, CostModel, DegenerateKKTError, InfeasibleError,
                              KKTSolution, NonConvergenceError, adjoint_solve, assemble_kkt,
                              kkt_matrix, kkt_residuals, solve_saa)


def quadratic_cost(P=None, d=1):
    """``f(y, z) = 0.5 z'Pz - y.z`` (``0.5 |z - y|^2`` up to a constant when P = I)."""
    P = np.eye(d) if P is None else np.asarray(P, dtype=float)
    d = P.shape[0]

    def value(Y, z):
        Y = np.atleast_2d(Y)
        return 0.5 * z @ P @ z - Y @ z

    def grad_z(Y, z):
        Y = np.atleast_2d(Y)
        return P @ z - Y

    def hess_zz(Y, z):
        return np.broadcast_to(P, (np.atleast_2d(Y).shape[0], d, d)).copy()

    def hess_zy(Y, z):
        return np.broadcast_to(-np.eye(d), (np.atleast_2d(Y).shape[0], d, d)).copy()

    return CostModel(value, grad_z, hess_zz, hess_zy)


def unit_box(d=1):
    eye = np.eye(d)
    return AffineConstraints.build(d, G=np.vstack([-eye, eye]),
                                   h=np.concatenate([np.zeros(d), np.ones(d)]))


def random_qp(rng, d, n, p):
    B = rng.standard_normal((d, d))
    P = B @ B.T + 0.5 * np.eye(d)
    z0 = rng.standard_normal(d)
    G = rng.standard_normal((n, d))
    h = G @ z0 + rng.uniform(0.01, 1.0, n)
    A = rng.standard_normal((p, d))
    cons = AffineConstraints.build(d, G=G, h=h, A=A if p else None, b=A @ z0 if p else None)
    Y = 3.0 * rng.standard_normal((int(rng.integers(1, 6)), d))
    return quadratic_cost(P), cons, Y


def test_interior_box_solution():
    sol = solve_saa([[0.5]], quadratic_cost(), unit_box())
    assert sol.z_star[0] == pytest.approx(0.5, abs=1e-8)
    assert np.all(np.abs(sol.lambda_star) < 1e-8)


def test_upper_bound_multiplier():
    sol = solve_saa([[2.0]], quadratic_cost(), unit_box())
    assert sol.z_star[0] == pytest.approx(1.0, abs=1e-8)
    # rows are [-z <= 0, z <= 1]; stationarity (z - y) + lam_upper = 0
    assert sol.lambda_star[1] == pytest.approx(1.0, abs=1e-7)
    assert sol.lambda_star[0] == pytest.approx(0.0, abs=1e-8)


def test_residuals_of_analytic_solutions():
    cons = unit_box()
    exact = KKTSolution(np.array([1.0]), np.array([0.0, 1.0]), np.zeros(0), np.array([1.0, 0.0]), ())
    assert max(kkt_residuals(exact, [[2.0]], quadratic_cost(), cons)) <= 1e-10
    moved = KKTSolution(np.array([0.5 + 1e-3]), np.zeros(2), np.zeros(0), np.array([0.5, 0.5]), ())
    stat, primal, comp = kkt_residuals(moved, [[0.5]], quadratic_cost(), cons)
    assert stat == pytest.approx(1e-3, rel=1e-9) and primal == 0.0 and comp == 0.0


def test_factory_mixture_solution_is_interior_and_matches_grid():
    cost, cons = tasks.factory_callbacks(tasks.FactoryTask(1, 2.0))
    Y = tasks.sample_mixture(tasks.factory_mixture(), 0, 10_000)
    sol = solve_saa(Y, cost, cons)
    grid = np.linspace(0.0, 2.0, 20_001)
    obj = np.exp(-np.outer(grid, Y[:, 0])).mean(axis=1)
    z_grid = grid[np.argmin(obj)]
    assert 0.05 < sol.z_star[0] < 1.95
    assert abs(sol.z_star[0] - z_grid) < 1e-2


@pytest.mark.parametrize("seed", range(5))
def test_random_qps_solve_to_tolerance(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        d = int(rng.integers(1, 11))
        cost, cons, Y = random_qp(rng, d, int(rng.integers(0, 21)), int(rng.integers(0, min(3, d) + 1)))
        sol = solve_saa(Y, cost, cons, tol=1e-8)
        assert max(sol.residuals) <= 1e-8
        assert np.all(sol.lambda_star >= -1e-10) and np.all(sol.slack >= -1e-8)
        assert np.all(np.abs(sol.lambda_star * sol.slack) <= 1e-7)


def test_infeasible_constraints():
    cons = AffineConstraints.build(1, G=np.array([[1.0], [-1.0]]), h=np.array([0.0, -1.0]))
    with pytest.raises(InfeasibleError):
        solve_saa([[0.0]], quadratic_cost(), cons)


def test_iteration_limit_reports_residuals():
    with pytest.raises(NonConvergenceError) as info:
        solve_saa([[0.3]], quadratic_cost(), unit_box(), max_iter=1)
    assert len(info.value.residuals) == 3


def test_constraint_shapes_checked():
    with pytest.raises(ValueError):
        AffineConstraints.build(2, G=np.ones((3, 2)), h=np.ones(2))
    with pytest.raises(ValueError):
        AffineConstraints.build(2, A=np.ones((2, 2)), b=np.ones(2))


def test_unconstrained_matrix_is_hessian():
    sol = solve_saa([[1.0, 2.0]], quadratic_cost(d=2), AffineConstraints.build(2))
    fac = assemble_kkt(sol, [[1.0, 2.0]], quadratic_cost(d=2), AffineConstraints.build(2))
    assert np.array_equal(fac.matrix, np.eye(2))
    dF = np.array([0.3, -0.7])
    assert np.allclose(adjoint_solve(fac, dF), -dF, rtol=0, atol=1e-15)
    fac2 = assemble_kkt(sol, [[1.0, 2.0]], quadratic_cost(2 * np.eye(2)), AffineConstraints.build(2))
    assert np.allclose(adjoint_solve(fac2, dF), -0.5 * dF, rtol=0, atol=1e-15)


def test_inactive_constraint_block_structure():
    cons = AffineConstraints.build(2, G=np.array([[1.0, 1.0], [1.0, -1.0]]), h=np.array([3.0, 5.0]))
    sol = KKTSolution(np.array([0.5, 0.5]), np.zeros(2), np.zeros(0), None, ())
    K = kkt_matrix(np.eye(2), sol, cons)
    slack = cons.G @ sol.z_star - cons.h
    assert np.all(K[2:, :2] == 0.0)
    assert np.linalg.det(K) == pytest.approx(np.prod(slack), rel=1e-12)


def test_factorization_and_adjoint_multiply_back():
    rng = np.random.default_rng(11)
    for _ in range(20):
        cost, cons, Y = random_qp(rng, 6, 12, 2)
        sol = solve_saa(Y, cost, cons, tol=1e-10)
        fac = assemble_kkt(sol, Y, cost, cons)
        v = rng.standard_normal(fac.matrix.shape[0])
        x = fac.solve(v)
        assert np.linalg.norm(fac.matrix @ x - v) <= 1e-8 * np.linalg.norm(v)
        assert np.allclose(x, np.linalg.solve(fac.matrix, v), rtol=1e-8, atol=1e-10)
        dF = rng.standard_normal(cons.d)
        u = adjoint_solve(fac, dF)
        target = np.zeros_like(u)
        target[:cons.d] = -dF
        assert np.max(np.abs(u @ fac.matrix - target)) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_adjoint_linear_in_rhs(seed, a, b):
    rng = np.random.default_rng(seed)
    cost, cons, Y = random_qp(rng, 4, 6, 1)
    fac = assemble_kkt(solve_saa(Y, cost, cons), Y, cost, cons)
    d1, d2 = rng.standard_normal(4), rng.standard_normal(4)
    lhs = adjoint_solve(fac, a * d1 + b * d2)
    rhs = a * adjoint_solve(fac, d1) + b * adjoint_solve(fac, d2)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * (1 + np.abs(lhs).max()))


def flat_cost(d=1):
    return CostModel(lambda Y, z: np.zeros(len(Y)), lambda Y, z: np.zeros((len(Y), d)),
                     lambda Y, z: np.zeros((len(Y), d, d)), lambda Y, z: np.zeros((len(Y), d, d)))


def test_singular_matrix_is_regularized():
    sol = KKTSolution(np.zeros(2), np.zeros(0), np.zeros(0), np.zeros(0), ())
    fac = assemble_kkt(sol, [[0.0, 0.0]], flat_cost(2), AffineConstraints.build(2))
    assert fac.regularization == 1e-10
    assert np.array_equal(fac.base, np.zeros((2, 2)))


def test_degenerate_matrix_raises():
    # zero Hessian and a zero multiplier on an active bound: the complementarity row vanishes
    cons = AffineConstraints.build(1, G=np.array([[1.0]]), h=np.array([0.0]))
    sol = KKTSolution(np.array([0.0]), np.array([0.0]), np.zeros(0), np.array([0.0]), ())
    with pytest.raises(DegenerateKKTError):
        assemble_kkt(sol, [[0.0]], flat_cost(), cons, max_cond=1e3)


def test_implicit_decision_derivative_matches_finite_differences():
    cost, cons = tasks.factory_callbacks(tasks.FactoryTask(2, 2.0))
    rng = np.random.default_rng(2)
    Y = 0.4 + 0.6 * rng.standard_normal((30, 2))
    V = rng.standard_normal(Y.shape)
    sol = solve_saa(Y, cost, cons, tol=1e-12)
    assert np.all(sol.slack > 1e-3)
    fac = assemble_kkt(sol, Y, cost, cons)
    rhs = np.zeros(fac.matrix.shape[0])
    rhs[:2] = -np.einsum("mab,mb->a", cost.hess_zy(Y, sol.z_star), V) / len(Y)
    dz = fac.solve(rhs)[:2]
    step = 1e-4
    zp = solve_saa(Y + step * V, cost, cons, tol=1e-12).z_star
    zm = solve_saa(Y - step * V, cost, cons, tol=1e-12).z_star
    fd = (zp - zm) / (2 * step)
    assert np.max(np.abs(dz - fd)) <= 1e-3 * np.max(np.abs(fd))


def test_power_hessian_is_identity():
    cost, cons = tasks.power_callbacks(tasks.PowerTask(6))
    Y = np.random.default_rng(0).uniform(1, 4, (25, 6))
    sol = solve_saa(Y, cost, cons)
    H = assemble_kkt(sol, Y, cost, cons).base[:6, :6]
    assert np.max(np.abs(H - np.eye(6))) <= 1e-12


def test_portfolio_hessian_is_scaled_second_moment():
    cost, cons = tasks.portfolio_callbacks(tasks.PortfolioTask(5, 0.7))
    Y = np.random.default_rng(1).normal(0.1, 1.0, (50, 5))
    sol = solve_saa(Y, cost, cons)
    H = assemble_kkt(sol, Y, cost, cons).base[:5, :5]
    assert np.max(np.abs(H - 0.7 * Y.T @ Y / 50)) <= 1e-12
