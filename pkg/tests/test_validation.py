import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffdfl.diffusion import LinearEpsilonModel, TimestepSampler, build_schedule, elbo_grad, sample
from diffdfl.validation import (LinearDiffusionOracle, cosine, fd_grad, linear_gaussian_density,
                                linear_gaussian_score, rel_error)


def perturbed_oracle(d, x_dim=2, T=6, seed=0, pert=0.05):
    s = build_schedule(T, 2e-3, 0.4)
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d, x_dim))
    base = LinearDiffusionOracle.near_optimal(W, s)
    return base.with_flat(base.flat() + pert * rng.standard_normal(base.flat().size)), rng


def test_fd_of_quadratic_and_linear():
    theta = np.array([0.3, -1.2, 2.0])
    assert np.max(np.abs(fd_grad(lambda v: 0.5 * v @ v, theta) - theta)) < 1e-10
    c = np.array([1.5, -0.5, 4.0])
    assert np.max(np.abs(fd_grad(lambda v: c @ v, theta) - c)) < 1e-10


def test_fd_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        fd_grad(lambda v: np.inf if v[0] > 0 else 0.0, np.array([0.0]), step=1e-3)


def test_cosine_trivial_cases():
    v = np.array([1.0, 2.0, -3.0])
    assert cosine(v, v) == pytest.approx(1.0)
    assert cosine(v, -v) == pytest.approx(-1.0)
    assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        cosine(v, np.zeros(3))


def test_rel_error_of_zero_vectors():
    assert rel_error(np.zeros(2), np.zeros(2)) == 0.0


def test_single_step_zero_model_density():
    s = build_schedule(1, 0.3, 0.3)
    oracle = LinearDiffusionOracle(np.zeros((1, 2, 2)), np.zeros((1, 2, 1)), np.zeros((1, 2)), s)
    mean, cov = linear_gaussian_density(oracle, np.zeros(1))
    assert np.allclose(mean, 0.0) and np.allclose(cov, np.eye(2) / 0.7, rtol=1e-14)


def test_density_mean_is_affine_in_context():
    oracle, rng = perturbed_oracle(3)
    x1, x2 = rng.standard_normal(2), rng.standard_normal(2)
    m = lambda x: linear_gaussian_density(oracle, x)[0]
    assert np.allclose(m(x1 + x2) + m(np.zeros(2)), m(x1) + m(x2), atol=1e-12)


def test_non_pd_covariance_raises():
    s = build_schedule(1, 0.3, 0.3)
    A = np.zeros((1, 1, 1))
    A[0, 0, 0] = np.sqrt(1 - s.alpha_bar[0]) / s.beta[0]  # L_1 = 0 collapses y_0
    oracle = LinearDiffusionOracle(A, np.zeros((1, 1, 1)), np.zeros((1, 1)), s)
    with pytest.raises(np.linalg.LinAlgError):
        linear_gaussian_density(oracle, np.zeros(1))


def test_sampler_matches_density():
    oracle, rng = perturbed_oracle(2, T=10, seed=1)
    model = LinearEpsilonModel(2, 2, 10)
    model.params.set_values(oracle.flat())
    x = rng.standard_normal(2)
    mean, cov = linear_gaussian_density(oracle, x)
    Y = sample(model, x, 100_000, rng, oracle.sched).y0
    se = Y.std(axis=0, ddof=1) / np.sqrt(len(Y))
    assert np.all(np.abs(Y.mean(axis=0) - mean) < 3 * se)
    assert np.linalg.norm(np.cov(Y.T) - cov) / np.linalg.norm(cov) < 0.05


@pytest.mark.parametrize("d", [1, 2, 3])
def test_score_matches_fd_of_log_density(d):
    oracle, rng = perturbed_oracle(d, seed=d)
    x = rng.standard_normal(2)
    mean, cov = oracle.density(x)
    y0 = rng.multivariate_normal(mean, cov)
    g = linear_gaussian_score(oracle, x, y0)
    fd = fd_grad(lambda th: oracle.with_flat(th).log_density(x, y0), oracle.flat(), step=1e-6)
    assert rel_error(g, fd) <= 1e-6


def test_mean_score_zero_in_c_components_at_mean():
    oracle, rng = perturbed_oracle(2, seed=4)
    x = rng.standard_normal(2)
    g = oracle.score(x, oracle.density(x)[0])
    T, dy, dx = oracle.B.shape
    nA, nB = T * dy * dy, T * dy * dx
    assert np.max(np.abs(g[nA:])) < 1e-12  # B and c enter only through the mean


def test_score_has_zero_mean():
    oracle, rng = perturbed_oracle(2, seed=5)
    x = rng.standard_normal(2)
    mean, cov = oracle.density(x)
    n = 20_000
    G = np.array([oracle.score(x, y) for y in rng.multivariate_normal(mean, cov, n)])
    se = G.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(G.mean(axis=0)) <= 3.5 * se)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_near_optimal_oracle_is_pd(seed):
    oracle, rng = perturbed_oracle(int(seed % 4) + 1, seed=seed, pert=0.0)
    _, cov = oracle.density(rng.standard_normal(2))
    assert np.linalg.eigvalsh(cov).min() > 0


def test_elbo_surrogate_correlates_with_exact_score():
    # exact score summed over labels against the single-pass ELBO gradient
    d, T = 2, 50
    s = build_schedule(T, 2e-3, 0.4)
    rng = np.random.default_rng((7, d))
    W = rng.standard_normal((d, 2))
    base = LinearDiffusionOracle.near_optimal(W, s)
    oracle = base.with_flat(base.flat() + 0.05 * rng.standard_normal(base.flat().size))
    model = LinearEpsilonModel(d, 2, T)
    model.params.set_values(oracle.flat())
    x = rng.standard_normal(2)
    Y0 = x @ W.T + rng.standard_normal((64, d))
    exact = sum(oracle.score(x, y) for y in Y0)
    sampler = TimestepSampler(T, adaptive=False)
    means = []
    for k in (1, 10, 100):
        means.append(np.mean([cosine(elbo_grad(model, Y0, x, sampler, k, rng, s), exact)
                              for _ in range(10)]))
    assert means[0] > 0
    assert means[0] <= means[1] <= means[2]
