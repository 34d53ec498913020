import math

import numpy as np
import pytest

from diffdfl.baselines import LOSS_KINDS, denoising_loss, gaussian_nll_loss, mse_loss, two_stage_loss
from diffdfl.diffusion import EpsilonModel, build_schedule
from diffdfl.estimators import GaussianPredictor
from diffdfl.nn import DenseNet, ParamVector
from diffdfl.runner import ExperimentConfig, train
from diffdfl.validation import fd_grad, rel_error


def point_net(seed=0):
    return DenseNet([2, 6, 3], ParamVector(), "silu", "net", np.random.default_rng(seed))


def gauss(seed=0):
    return GaussianPredictor(2, 3, (6,), "silu", ParamVector(), np.random.default_rng(seed))


def check_fd(params, loss_fn):
    theta0 = params.copy_values()
    _, g = loss_fn()

    def f(theta):
        params.set_values(theta)
        return loss_fn()[0]

    fd = fd_grad(f, theta0, step=1e-6)
    params.set_values(theta0)
    return rel_error(g, fd)


def test_mse_zero_at_prediction():
    net = point_net()
    x = np.random.default_rng(1).standard_normal((4, 2))
    loss, g = mse_loss(net, x, net.forward(x))
    assert loss == 0.0 and not g.any()


def test_gaussian_nll_at_mean_with_unit_variance():
    pred = gauss()
    pred.params.view("gauss.W1")[3:] = 0.0
    pred.params.view("gauss.b1")[3:] = 0.0
    x = np.array([[0.2, -0.1]])
    mu, _ = pred.mean_logvar(x)
    loss, _ = gaussian_nll_loss(pred, x, mu)
    assert loss == pytest.approx(1.5 * math.log(2 * math.pi), rel=1e-12)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    net = point_net(3)
    assert check_fd(net.params, lambda: mse_loss(net, x, y)) < 1e-5
    pred = gauss(4)
    assert check_fd(pred.params, lambda: gaussian_nll_loss(pred, x, y)) < 1e-5
    model = EpsilonModel(3, 2, (8,), 4, 4, "silu", ParamVector(), np.random.default_rng(5))
    s = build_schedule(6)
    t, eps = rng.integers(1, 7, 5), rng.standard_normal((5, 3))
    assert check_fd(model.params, lambda: denoising_loss(model, x, y, None, s, t=t, eps=eps)) < 1e-5


def test_dispatch_and_family_checks():
    x, y = np.zeros((2, 2)), np.ones((2, 3))
    assert two_stage_loss("mse", point_net(), x, y)[0] == mse_loss(point_net(), x, y)[0]
    with pytest.raises(TypeError):
        two_stage_loss("mse", gauss(), x, y)
    with pytest.raises(TypeError):
        two_stage_loss("gaussian-nll", point_net(), x, y)
    with pytest.raises(TypeError):
        two_stage_loss("denoising", point_net(), x, y, np.random.default_rng(0), build_schedule(4))
    model = EpsilonModel(3, 2, (8,), 4, 4, "silu", ParamVector(), np.random.default_rng(5))
    with pytest.raises(ValueError):
        two_stage_loss("denoising", model, x, y)
    with pytest.raises(ValueError):
        two_stage_loss("huber", point_net(), x, y)
    assert LOSS_KINDS == ("mse", "gaussian-nll", "denoising")


def test_batch_size_mismatch():
    with pytest.raises(ValueError):
        mse_loss(point_net(), np.zeros((3, 2)), np.zeros((2, 3)))


def test_two_stage_diffusion_recovers_mixture_weights():
    cfg = ExperimentConfig(task="factory", method="diff-ts", dim=1, epochs=30, n_train=1024,
                           n_test=16, oracle_draws=100, seed=0, lr=3e-3)
    model = train(cfg).model
    Y = model.scale.from_model(model.draw(np.zeros(0), 20_000, np.random.default_rng(1))[0])
    # the two components sit at +1 and -3; -1 separates them
    assert abs(np.mean(Y > -1.0) - 0.8) <= 0.05
