"""Two-stage (prediction-only) training losses for the three predictor families."""
from __future__ import annotations

import math

import numpy as np

from .diffusion import EpsilonModel, LinearEpsilonModel, NoiseSchedule, forward_noise
from .estimators import GaussianPredictor
from .nn import DenseNet

LOSS_KINDS = ("mse", "gaussian-nll", "denoising")


def _batch(x, y):
    x = np.asarray(x, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.ndim == 1:
        x = np.broadcast_to(x, (y.shape[0], x.size))
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} contexts for {y.shape[0]} labels")
    return x, y


def mse_loss(net: DenseNet, x, y):
    """Mean over the batch of ``||net(x) - y||^2`` and its parameter gradient."""
    x, y = _batch(x, y)
    r = net.forward(x) - y
    B = y.shape[0]
    return float(np.sum(r * r) / B), net.vjp(x, 2.0 * r / B)[0]


def gaussian_nll_loss(pred: GaussianPredictor, x, y):
    """Mean negative log-likelihood ``0.5 (r^2 / s^2 + log s^2 + log 2 pi)`` summed over dims."""
    x, y = _batch(x, y)
    B = y.shape[0]
    mu, logvar = pred.mean_logvar(x)
    inv = np.exp(-logvar)
    r = y - mu
    loss = 0.5 * np.sum(r * r * inv + logvar + math.log(2 * math.pi)) / B
    cot = np.concatenate([-r * inv, 0.5 * (1.0 - r * r * inv)], axis=1) / B
    return float(loss), pred.net.vjp(x, cot)[0]


def denoising_loss(model, x, y, rng: np.random.Generator, sched: NoiseSchedule, t=None, eps=None):
    """Mean denoising error with one uniform ``t`` and one noise draw per example."""
    x, y = _batch(x, y)
    B = y.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(y.shape)
    y_t = forward_noise(y, t, eps, sched)
    r = eps - model.eps(y_t, t, x)
    return float(np.sum(r * r) / B), model.vjp(y_t, t, x, -2.0 * r / B)[0]


def two_stage_loss(kind, predictor, x, y_label, rng=None, sched=None):
    """``(loss, param_grad)`` of the prediction loss matching ``predictor``'s family."""
    if kind == "mse":
        if not isinstance(predictor, DenseNet):
            raise TypeError("mse loss needs a DenseNet point predictor")
        return mse_loss(predictor, x, y_label)
    if kind == "gaussian-nll":
        if not isinstance(predictor, GaussianPredictor):
            raise TypeError("gaussian-nll loss needs a GaussianPredictor")
        return gaussian_nll_loss(predictor, x, y_label)
    if kind == "denoising":
        if not isinstance(predictor, (EpsilonModel, LinearEpsilonModel)):
            raise TypeError("denoising loss needs a noise-prediction model")
        if rng is None or sched is None:
            raise ValueError("denoising loss needs rng and sched")
        return denoising_loss(predictor, x, y_label, rng, sched)
    raise ValueError(f"unknown two-stage loss {kind!r}; expected one of {LOSS_KINDS}")
