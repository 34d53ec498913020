"""Task instances and their synthetic data generators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tasks
from .config import ExperimentConfig

# generator matrices are drawn from this seed unless data_seed is set, so
# runs with different training seeds share one problem instance
PROBLEM_SEED = 20240


@dataclass
class IidMixture:
    """Context-free labels: every coordinate an independent mixture draw."""

    gen: tasks.MixtureOfGaussians
    y_dim: int
    x_dim: int = 0

    def sample_x(self, rng, count):
        return np.zeros((count, 0))

    def sample_y(self, rng, x, count):
        return tasks.sample_mixture(self.gen, rng, count, self.y_dim)

    def sample(self, rng, count):
        return self.sample_x(rng, count), self.sample_y(rng, None, count)


@dataclass
class Problem:
    task: object
    cost: tasks.CostModel
    cons: tasks.AffineConstraints
    generator: object
    x_dim: int
    y_dim: int

    @property
    def name(self):
        return type(self.task).__name__


def _power_generator(cfg, rng):
    hours = np.arange(cfg.dim)
    profile = 3.0 + 1.5 * np.sin(2 * np.pi * (hours - 8) / 24.0)
    W = 0.3 * rng.standard_normal((cfg.dim, cfg.x_dim)) / np.sqrt(max(cfg.x_dim, 1))
    noise = tasks.MixtureOfGaussians((0.7, 0.3), (0.0, 0.8), (0.2, 0.3))
    return tasks.ConditionalGenerator(W, noise, profile)


def _portfolio_generator(cfg, rng):
    # daily returns in percent, with an occasional crash component
    W = 0.5 * rng.standard_normal((cfg.dim, cfg.x_dim)) / np.sqrt(max(cfg.x_dim, 1))
    noise = tasks.MixtureOfGaussians((0.9, 0.1), (0.1, -2.0), (1.0, 1.5))
    return tasks.ConditionalGenerator(W, noise, np.full(cfg.dim, 0.05))


def _inventory_generator(cfg, rng):
    means, stds = tasks.INVENTORY_MIXTURES[cfg.K]
    V = 2.0 * rng.standard_normal((cfg.K, cfg.x_dim))
    return tasks.ConditionalMixture(V, means, stds, offset=-min(means) + 1.0)


def make_problem(cfg: ExperimentConfig) -> Problem:
    rng = np.random.default_rng(PROBLEM_SEED if cfg.data_seed < 0 else cfg.data_seed)
    if cfg.task == "factory":
        task = tasks.FactoryTask(cfg.dim, cfg.C)
        cost, cons = tasks.factory_callbacks(task)
        gen = IidMixture(tasks.factory_mixture(p=cfg.mixture_p), cfg.dim)
        if cfg.x_dim != 0:
            raise ValueError("the factory task has no context (x_dim must be 0)")
    elif cfg.task == "power":
        task = tasks.PowerTask(cfg.dim, cfg.gamma_s, cfg.gamma_e, cfg.c_r)
        cost, cons = tasks.power_callbacks(task)
        gen = _power_generator(cfg, rng)
    elif cfg.task == "portfolio":
        task = tasks.PortfolioTask(cfg.dim, cfg.alpha)
        cost, cons = tasks.portfolio_callbacks(task)
        gen = _portfolio_generator(cfg, rng)
    else:
        task = tasks.InventoryTask(cfg.c0, cfg.q0, cfg.cb, cfg.rb, cfg.ch, cfg.rh, cfg.z_max)
        cost, cons = tasks.inventory_callbacks(task)
        gen = _inventory_generator(cfg, rng)
    return Problem(task, cost, cons, gen, cfg.x_dim, cfg.dim)
