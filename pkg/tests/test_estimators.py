import numpy as np
import pytest

from diffdfl import estimators, tasks
from diffdfl.decision import CostModel, solve_saa
from diffdfl.diffusion import (EpsilonModel, LinearEpsilonModel, TimestepSampler, build_schedule,
                               elbo_grad, reverse_sample, sample)
from diffdfl.estimators import (GaussianPredictor, GradientEstimate, deterministic_grad,
                                diff_reparam_grad, diff_score_grad, gauss_reparam_grad,
                                gauss_score_grad, score_grad_explicit)
from diffdfl.nn import DenseNet, ParamVector
from diffdfl.validation import LinearDiffusionOracle, cosine, fd_grad, rel_error


def factory(d=1):
    return tasks.factory_callbacks(tasks.FactoryTask(d, 2.0))


def linear_t1_instance():
    s = build_schedule(1, 0.1, 0.1)
    rng = np.random.default_rng(3)
    model = LinearEpsilonModel(1, 1, 1, rng=rng, scale=0.3)
    x = np.array([0.7])
    noises = rng.standard_normal((2, 12, 1)) - 0.2
    return s, model, x, noises


def end_to_end(model, x, noises, s, cost, cons, y_true):
    def F(theta):
        model.params.set_values(theta)
        Y = reverse_sample(model, x, noises, s).y0
        return cost.value(y_true[None], solve_saa(Y, cost, cons, tol=1e-12).z_star)[0]
    return F


def test_reparam_matches_finite_differences_linear_t1():
    s, model, x, noises = linear_t1_instance()
    cost, cons = factory()
    y_true = np.array([0.4])
    traj = reverse_sample(model, x, noises, s)
    sol = solve_saa(traj.y0, cost, cons, tol=1e-12)
    assert np.all(sol.slack > 0.05)
    dF = cost.grad_z(y_true[None], sol.z_star)[0]
    g = diff_reparam_grad(model, x, traj, sol, cost, cons, dF, s).grad
    theta0 = model.params.copy_values()
    fd = fd_grad(end_to_end(model, x, noises, s, cost, cons, y_true), theta0, step=1e-4)
    model.params.set_values(theta0)
    assert rel_error(g, fd) <= 1e-4


def test_zero_outer_gradient_gives_zero():
    s, model, x, noises = linear_t1_instance()
    cost, cons = factory()
    traj = reverse_sample(model, x, noises, s)
    sol = solve_saa(traj.y0, cost, cons)
    assert not diff_reparam_grad(model, x, traj, sol, cost, cons, np.zeros(1), s).grad.any()


def test_label_free_cost_gives_zero():
    s, model, x, noises = linear_t1_instance()
    quad = CostModel(lambda Y, z: np.full(len(Y), 0.5 * (z @ z)),
                     lambda Y, z: np.tile(z, (len(Y), 1)),
                     lambda Y, z: np.tile(np.eye(1), (len(Y), 1, 1)),
                     lambda Y, z: np.zeros((len(Y), 1, 1)))
    _, cons = factory()
    traj = reverse_sample(model, x, noises, s)
    sol = solve_saa(traj.y0, quad, cons)
    assert not diff_reparam_grad(model, x, traj, sol, quad, cons, np.ones(1), s).grad.any()


def score_setup(seed=0, M=16):
    s = build_schedule(8)
    model = EpsilonModel(2, 1, (8,), 4, 4, "silu", ParamVector(), np.random.default_rng(seed))
    cost, cons = factory(2)
    rng = np.random.default_rng(seed + 1)
    Y = 0.5 + rng.standard_normal((M, 2))
    x = np.array([0.2])
    sol = solve_saa(Y, cost, cons)
    dF = cost.grad_z(np.array([[0.3, 0.6]]), sol.z_star)[0]
    return s, model, cost, cons, Y, x, sol, dF


def test_weighted_elbo_equals_explicit_assembly():
    s, model, cost, cons, Y, x, sol, dF = score_setup()
    sampler = TimestepSampler(8, adaptive=False)
    per = elbo_grad(model, Y, x, sampler, 2, np.random.default_rng(5), s, per_example=True)
    weighted = diff_score_grad(model, x, Y, sol, cost, cons, dF, sampler, 2, None, s,
                               per_sample_grads=per).grad
    explicit = score_grad_explicit(Y, sol, cost, cons, dF, per)
    assert rel_error(weighted, explicit) <= 1e-12
    # the single weighted pass draws the same timesteps and noises from the same seed
    one_pass = diff_score_grad(model, x, Y, sol, cost, cons, dF, sampler, 2,
                               np.random.default_rng(5), s).grad
    assert rel_error(one_pass, explicit) <= 1e-12


def test_weights_are_detached():
    s, model, cost, cons, Y, x, sol, dF = score_setup(seed=2)
    sampler = TimestepSampler(8, adaptive=False)
    est = diff_score_grad(model, x, Y, sol, cost, cons, dF, sampler, 1, np.random.default_rng(7), s)
    assert est.weights.shape == (len(Y),)
    fixed = diff_score_grad(model, x, Y, sol, cost, cons, dF, sampler, 1, np.random.default_rng(7), s,
                            weights=est.weights.copy())
    assert np.array_equal(est.grad, fixed.grad)
    # shifting every grad_z f by a constant changes the weights; the gradient stays the
    # weighted combination of the same ELBO gradients
    shifted = CostModel(cost.value, lambda Yb, z: cost.grad_z(Yb, z) + 0.3, cost.hess_zz, cost.hess_zy)
    moved = diff_score_grad(model, x, Y, sol, shifted, cons, dF, sampler, 1,
                            np.random.default_rng(7), s)
    assert not np.allclose(moved.weights, est.weights)
    again = diff_score_grad(model, x, Y, sol, cost, cons, dF, sampler, 1, np.random.default_rng(7), s,
                            weights=moved.weights.copy())
    assert np.array_equal(moved.grad, again.grad)


def test_weight_count_checked():
    s, model, cost, cons, Y, x, sol, dF = score_setup()
    with pytest.raises(ValueError):
        diff_score_grad(model, x, Y, sol, cost, cons, dF, TimestepSampler(8), 1,
                        np.random.default_rng(0), s, weights=np.ones(3))


def test_constant_weights_give_zero_mean_score():
    # the linear model at the optimum for N(Wx, I) samples its own training distribution
    s = build_schedule(20, 2e-3, 0.4)
    W, x = np.array([[0.7]]), np.array([1.0])
    model = LinearEpsilonModel(1, 1, 20)
    model.params.set_values(LinearDiffusionOracle.near_optimal(W, s).flat())
    rng = np.random.default_rng(0)
    sampler = TimestepSampler(20, adaptive=False)
    n, M = 10_000, 4
    G = np.array([diff_score_grad(model, x, sample(model, x, M, rng, s).y0, None, None, None, None,
                                  sampler, 1, rng, s, weights=np.ones(M)).grad for _ in range(n)])
    se = G.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(G.mean(axis=0)) <= 3 * se)


def gauss_setup(seed=0, d=2, hidden=(4,)):
    params = ParamVector()
    pred = GaussianPredictor(2, d, hidden, "silu", params, np.random.default_rng(seed))
    params.view("gauss.b1")[:d] += 0.5
    return pred, np.array([0.3, -0.4])


def test_gauss_small_sigma_matches_deterministic():
    pred, x = gauss_setup()
    pred.params.view("gauss.b1")[2:] = -60.0
    cost, cons = factory(2)
    eps = np.random.default_rng(1).standard_normal((6, 2))
    Y = pred.sample(x, eps)
    sol = solve_saa(Y, cost, cons, tol=1e-12)
    dF = np.array([0.2, -0.5])
    g_rp = gauss_reparam_grad(pred, x, eps, sol, cost, cons, dF).grad
    g_det = deterministic_grad(pred.mean_head(), x, sol, cost, cons, dF).grad
    assert rel_error(g_rp, g_det) <= 1e-6


def test_gauss_reparam_matches_finite_differences():
    pred, x = gauss_setup(seed=6)
    cost, cons = factory(2)
    eps = np.random.default_rng(4).standard_normal((10, 2))
    y_true = np.array([0.8, -0.1])
    sol = solve_saa(pred.sample(x, eps), cost, cons, tol=1e-12)
    assert np.all(sol.slack > 0.02)
    dF = cost.grad_z(y_true[None], sol.z_star)[0]
    g = gauss_reparam_grad(pred, x, eps, sol, cost, cons, dF).grad
    theta0 = pred.params.copy_values()

    def F(theta):
        pred.params.set_values(theta)
        z = solve_saa(pred.sample(x, eps), cost, cons, tol=1e-12).z_star
        return cost.value(y_true[None], z)[0]

    fd = fd_grad(F, theta0, step=1e-4)
    pred.params.set_values(theta0)
    assert rel_error(g, fd) <= 1e-4


def test_zero_noise_leaves_sigma_head_untouched():
    pred, x = gauss_setup()
    cost, cons = factory(2)
    eps = np.zeros((1, 2))
    sol = solve_saa(pred.sample(x, eps), cost, cons)
    g = gauss_reparam_grad(pred, x, eps, sol, cost, cons, np.array([1.0, 1.0])).grad
    assert not pred.params.view("gauss.W1", g)[2:].any()
    assert not pred.params.view("gauss.b1", g)[2:].any()


def test_gauss_score_zero_at_mean():
    pred, x = gauss_setup()
    mu, _ = pred.mean_logvar(x)
    cot = pred.score_cotangents(x, mu[None])
    assert not cot[0, :2].any()


def test_gauss_score_unbiased_against_reparam():
    pred, x = gauss_setup(seed=5)
    cost, cons = factory(2)
    n = 100_000
    eps = np.random.default_rng(6).standard_normal((n, 2))
    Y = pred.sample(x, eps)
    sol = solve_saa(Y, cost, cons)
    dF = np.array([0.4, -0.3])
    u_z = estimators.decision_adjoint(sol, Y, cost, cons, dF)
    w = estimators.score_weights(u_z, Y, sol, cost)
    score_rows = w[:, None] * pred.score(x, Y)
    c = estimators.pathwise_cotangents(u_z, Y, sol, cost) * n
    _, logvar = pred.mean_logvar(x)
    cot = np.concatenate([c, 0.5 * c * np.exp(0.5 * logvar) * eps], axis=1)
    xb = np.broadcast_to(x, (n, 2))
    rp_rows = pred.net.vjp(xb, cot, per_example=True)[0]
    diff = score_rows.mean(axis=0) - rp_rows.mean(axis=0)
    se = np.sqrt(score_rows.var(axis=0, ddof=1) / n + rp_rows.var(axis=0, ddof=1) / n)
    assert np.all(np.abs(diff) <= 3 * se + 1e-12)
    # the batch estimators are the means of these rows
    assert rel_error(gauss_score_grad(pred, x, Y, sol, cost, cons, dF).grad, score_rows.mean(axis=0)) < 1e-9
    assert rel_error(gauss_reparam_grad(pred, x, eps, sol, cost, cons, dF).grad, rp_rows.mean(axis=0)) < 1e-9


def test_gauss_score_zero_mean_for_constant_weights():
    pred, x = gauss_setup(seed=7)
    n = 100_000
    Y = pred.sample(x, np.random.default_rng(8).standard_normal((n, 2)))
    S = pred.score(x, Y)
    assert np.all(np.abs(S.mean(axis=0)) <= 3 * S.std(axis=0, ddof=1) / np.sqrt(n) + 1e-12)


def test_deterministic_zero_cotangent_and_fd():
    params = ParamVector()
    net = DenseNet([2, 5, 2], params, "silu", "det", np.random.default_rng(2))
    params.view("det.b1")[:] += [0.4, 1.0]
    x = np.array([0.1, -0.2])
    cost, cons = tasks.portfolio_callbacks(tasks.PortfolioTask(2, 1.0))
    y_true = np.array([0.3, -0.2])
    sol = solve_saa(net.forward(x)[None], cost, cons, tol=1e-12)
    assert not deterministic_grad(net, x, sol, cost, cons, np.zeros(2)).grad.any()
    dF = cost.grad_z(y_true[None], sol.z_star)[0]
    g = deterministic_grad(net, x, sol, cost, cons, dF).grad
    theta0 = params.copy_values()

    def F(theta):
        params.set_values(theta)
        z = solve_saa(net.forward(x)[None], cost, cons, tol=1e-12).z_star
        return cost.value(y_true[None], z)[0]

    fd = fd_grad(F, theta0, step=1e-4)
    params.set_values(theta0)
    assert np.all(sol.slack > 1e-3)
    assert rel_error(g, fd) <= 1e-4


def test_gaussian_estimators_agree_in_direction():
    pred, x = gauss_setup(seed=9)
    cost, cons = factory(2)
    eps = np.random.default_rng(10).standard_normal((100_000, 2))
    Y = pred.sample(x, eps)
    sol = solve_saa(Y, cost, cons)
    dF = np.array([0.4, -0.3])
    g_rp = gauss_reparam_grad(pred, x, eps, sol, cost, cons, dF).grad
    g_sf = gauss_score_grad(pred, x, Y, sol, cost, cons, dF).grad
    assert cosine(g_rp, g_sf) >= 0.95


def test_gradient_estimate_kind_checked():
    with pytest.raises(ValueError):
        GradientEstimate(np.zeros(2), "bogus", 1)
