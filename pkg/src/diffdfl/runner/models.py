"""Uniform wrappers around the three predictor families."""
from __future__ import annotations

import numpy as np

from dataclasses import dataclass

from .. import baselines, diffusion, estimators
from ..decision import CostModel
from ..nn import DenseNet, ParamVector
from .config import ExperimentConfig


@dataclass
class Standardizer:
    """Affine label map ``y = mean + std * y_model``; models work in ``y_model``."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, Y):
        Y = np.atleast_2d(Y)
        std = Y.std(axis=0)
        return cls(Y.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def to_model(self, Y):
        return (np.asarray(Y, dtype=float) - self.mean) / self.std

    def from_model(self, Y):
        return self.mean + self.std * np.asarray(Y, dtype=float)

    def wrap_cost(self, cost: CostModel) -> CostModel:
        """The same cost seen as a function of ``y_model``."""
        m, s = self.mean, self.std

        def lift(fn):
            return lambda Y, z: fn(m + s * np.atleast_2d(Y), z)

        def hess_zy(Y, z):
            return cost.hess_zy(m + s * np.atleast_2d(Y), z) * s

        smoothed = None if cost.smoothed is None else (lambda e: self.wrap_cost(cost.smoothed(e)))
        return CostModel(lift(cost.value), lift(cost.grad_z), lift(cost.hess_zz), hess_zy, smoothed)


class PointModel:
    """Deterministic predictor ``y_hat = net(x)``; always one scenario."""

    family = "det"

    def __init__(self, cfg: ExperimentConfig, x_dim, y_dim, rng):
        self.params = ParamVector()
        act = cfg.activation
        self.net = DenseNet([x_dim, *cfg.hidden, y_dim], self.params, act, "det", rng)

    def draw(self, x, count, rng, keep_path=False):
        return np.atleast_2d(self.net.forward(x)), None

    def predict_mean(self, samples):
        return samples.mean(axis=0)

    def two_stage(self, X, Y, rng):
        return baselines.mse_loss(self.net, X, Y)

    def dfl_grad(self, x, Y, path, sol, cost, cons, dF_dz, rng):
        return estimators.deterministic_grad(self.net, x, sol, cost, cons, dF_dz).grad


class GaussModel:
    family = "gauss"

    def __init__(self, cfg: ExperimentConfig, x_dim, y_dim, rng):
        self.params = ParamVector()
        self.pred = estimators.GaussianPredictor(x_dim, y_dim, cfg.hidden, cfg.activation,
                                                 self.params, rng)
        self.estimator = cfg.estimator

    def draw(self, x, count, rng, keep_path=False):
        eps = rng.standard_normal((count, self.pred.y_dim))
        return self.pred.sample(x, eps), eps

    def predict_mean(self, samples):
        return samples.mean(axis=0)

    def two_stage(self, X, Y, rng):
        return baselines.gaussian_nll_loss(self.pred, X, Y)

    def dfl_grad(self, x, Y, eps, sol, cost, cons, dF_dz, rng):
        if self.estimator == "rp":
            return estimators.gauss_reparam_grad(self.pred, x, eps, sol, cost, cons, dF_dz).grad
        return estimators.gauss_score_grad(self.pred, x, Y, sol, cost, cons, dF_dz).grad


class DiffusionModel:
    family = "diff"

    def __init__(self, cfg: ExperimentConfig, x_dim, y_dim, rng):
        self.params = ParamVector()
        self.model = diffusion.EpsilonModel(y_dim, x_dim, cfg.hidden, cfg.embed_dim,
                                            cfg.proj_dim, cfg.activation, self.params, rng)
        self.sched = diffusion.build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
        self.sampler = diffusion.TimestepSampler(cfg.T, adaptive=cfg.adaptive_t)
        self.estimator = cfg.estimator
        self.k = cfg.k

    def draw(self, x, count, rng, keep_path=False):
        traj = diffusion.sample(self.model, x, count, rng, self.sched)
        return traj.y0, (traj if keep_path else None)

    def predict_mean(self, samples):
        return samples.mean(axis=0)

    def two_stage(self, X, Y, rng):
        return baselines.denoising_loss(self.model, X, Y, rng, self.sched)

    def dfl_grad(self, x, Y, traj, sol, cost, cons, dF_dz, rng):
        if self.estimator == "rp":
            return estimators.diff_reparam_grad(self.model, x, traj, sol, cost, cons, dF_dz,
                                                self.sched).grad
        return estimators.diff_score_grad(self.model, x, Y, sol, cost, cons, dF_dz, self.sampler,
                                          self.k, rng, self.sched).grad


FAMILIES = {"det": PointModel, "gauss": GaussModel, "diff": DiffusionModel}


def build_model(cfg: ExperimentConfig, x_dim, y_dim, rng):
    return FAMILIES[cfg.family](cfg, x_dim, y_dim, rng)
