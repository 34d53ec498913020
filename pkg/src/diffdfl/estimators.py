"""End-to-end gradients ``dF/dtheta`` through the stochastic decision layer.

All estimators share one adjoint solve ``u^T K = -[dF/dz; 0; 0]^T``; with
``u_z`` the first ``d`` entries the total derivative is
``u_z^T d/dtheta [(1/M) sum_i grad_z f(y_i, z*)]``, where the inner
derivative is taken either pathwise (reparameterization) or through the
log-likelihood (score function).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffusion
from .decision import AffineConstraints, CostModel, KKTSolution, adjoint_solve, assemble_kkt
from .nn import DenseNet, ParamVector

KINDS = ("diff-reparam", "diff-score", "gauss-reparam", "gauss-score", "deterministic")


@dataclass
class GradientEstimate:
    grad: np.ndarray
    kind: str
    M: int
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")


def decision_adjoint(sol: KKTSolution, samples, cost: CostModel, cons: AffineConstraints, dF_dz):
    """``u_z``: the decision block of the adjoint vector."""
    fac = assemble_kkt(sol, samples, cost, cons)
    return adjoint_solve(fac, dF_dz)[:cons.d]


def pathwise_cotangents(u_z, samples, sol, cost):
    """Per-sample cotangents on ``y_i``: ``hess_zy(y_i, z*)^T u_z / M``."""
    Y = np.atleast_2d(samples)
    return np.einsum("mab,a->mb", cost.hess_zy(Y, sol.z_star), u_z) / Y.shape[0]


def score_weights(u_z, samples, sol, cost):
    """Per-sample scalar weights ``w_i = u_z . grad_z f(y_i, z*)``.

    Plain arrays: nothing downstream differentiates through them.
    """
    return cost.grad_z(np.atleast_2d(samples), sol.z_star) @ u_z


def diff_reparam_grad(model, x, traj: diffusion.Trajectory, sol, cost, cons, dF_dz,
                      sched: diffusion.NoiseSchedule) -> GradientEstimate:
    """Backpropagate through the recorded reverse chains (batched ``traj``)."""
    Y = np.atleast_2d(traj.y0)
    if Y.shape[1] != model.y_dim:
        raise ValueError("trajectory does not match model output dimension")
    u_z = decision_adjoint(sol, Y, cost, cons, dF_dz)
    cot = pathwise_cotangents(u_z, Y, sol, cost)
    if traj.states.ndim == 2:
        cot = cot[0]
    grad = diffusion.trajectory_vjp(model, traj, cot, sched)
    return GradientEstimate(grad, "diff-reparam", Y.shape[0])


def weighted_elbo_grad(weights, per_sample_grads):
    """``(1/M) sum_i w_i g_i`` with the weights held fixed."""
    weights = np.asarray(weights, dtype=float)
    return weights @ per_sample_grads / weights.size


def diff_score_grad(model, x, samples, sol, cost, cons, dF_dz, sampler, k,
                    rng: np.random.Generator, sched, per_sample_grads=None,
                    weights=None) -> GradientEstimate:
    """Weighted-ELBO estimator: ``(1/M) sum_i w_i * elbo_grad(y_i)``.

    Phase one evaluates the weights from the solved decision; phase two
    takes the ELBO gradients with the weights as constants, so nothing
    flows through them.  ``weights`` skips phase one.  Pass
    ``per_sample_grads`` (``(M, P)``) to reuse already-drawn ELBO
    gradients; otherwise one weighted pass over the batch is made.
    """
    Y = np.atleast_2d(samples)
    M = Y.shape[0]
    if weights is None:
        u_z = decision_adjoint(sol, Y, cost, cons, dF_dz)
        weights = score_weights(u_z, Y, sol, cost)
    w = np.array(weights, dtype=float)
    if w.shape != (M,):
        raise ValueError(f"expected {M} weights, got shape {w.shape}")
    if per_sample_grads is None:
        grad = diffusion.elbo_grad(model, Y, x, sampler, k, rng, sched, weights=w / M)
    else:
        grad = weighted_elbo_grad(w, per_sample_grads)
    return GradientEstimate(grad, "diff-score", M, w)


def score_grad_explicit(samples, sol, cost, cons, dF_dz, per_sample_scores):
    """Direct assembly: solve ``K X = [E[grad_z f s^T]; 0; 0]`` then contract with ``dF/dz``.

    Same quantity as :func:`diff_score_grad` / :func:`gauss_score_grad`
    without the adjoint shortcut; used to check the weighted form.
    """
    Y = np.atleast_2d(samples)
    fac = assemble_kkt(sol, Y, cost, cons)
    gz = cost.grad_z(Y, sol.z_star)
    rhs_top = gz.T @ per_sample_scores / Y.shape[0]
    rhs = np.zeros((fac.matrix.shape[0], rhs_top.shape[1]))
    rhs[:cons.d] = rhs_top
    X = fac.solve(rhs)
    return -np.asarray(dF_dz, dtype=float) @ X[:cons.d]


class GaussianPredictor:
    """Diagonal Gaussian ``N(mu(x), diag(exp(logvar(x))))`` from one MLP head of width ``2 dy``."""

    def __init__(self, x_dim, y_dim, hidden=(64, 64), activation="silu",
                 params: ParamVector | None = None, rng=None, init_logvar=0.0):
        self.x_dim, self.y_dim = int(x_dim), int(y_dim)
        self.params = ParamVector() if params is None else params
        self.net = DenseNet([self.x_dim, *hidden, 2 * self.y_dim], self.params, activation,
                            "gauss", rng)
        b_last = self.params.view(f"gauss.b{len(self.net.widths) - 2}")
        b_last[self.y_dim:] = init_logvar

    def mean_logvar(self, x):
        out = self.net.forward(x)
        return out[..., :self.y_dim], out[..., self.y_dim:]

    def sample(self, x, eps):
        mu, logvar = self.mean_logvar(x)
        return mu + np.exp(0.5 * logvar) * eps

    def log_prob(self, x, y):
        mu, logvar = self.mean_logvar(x)
        r = np.asarray(y) - mu
        return -0.5 * np.sum(r * r * np.exp(-logvar) + logvar + math.log(2 * math.pi), axis=-1)

    def score_cotangents(self, x, Y):
        """Per-sample cotangents on ``[mu, logvar]`` equal to ``grad log p(y_i)``."""
        mu, logvar = self.mean_logvar(x)
        inv = np.exp(-logvar)
        r = np.atleast_2d(Y) - mu
        return np.concatenate([r * inv, 0.5 * (r * r * inv - 1.0)], axis=1)

    def score(self, x, Y):
        """Per-sample ``grad_theta log p(y_i | x)``, shape ``(M, P)``."""
        cot = self.score_cotangents(x, Y)
        xb = np.broadcast_to(np.asarray(x, dtype=float), (cot.shape[0], self.x_dim))
        return self.net.vjp(xb, cot, per_example=True)[0]

    def mean_head(self):
        return _MeanHead(self)


class _MeanHead:
    """The ``mu`` half of a Gaussian predictor, shaped like a DenseNet."""

    def __init__(self, pred: GaussianPredictor):
        self.pred = pred
        self.params = pred.params

    def forward(self, x):
        return self.pred.mean_logvar(x)[0]

    def vjp(self, x, cotangent, per_example=False):
        cot = np.asarray(cotangent, dtype=float)
        full = np.concatenate([cot, np.zeros_like(cot)], axis=-1)
        return self.pred.net.vjp(x, full, per_example)


def gauss_reparam_grad(pred: GaussianPredictor, x, eps, sol, cost, cons, dF_dz) -> GradientEstimate:
    """Pathwise gradient through ``y = mu + sigma * eps`` (single step)."""
    eps = np.atleast_2d(eps)
    Y = pred.sample(x, eps)
    u_z = decision_adjoint(sol, Y, cost, cons, dF_dz)
    c = pathwise_cotangents(u_z, Y, sol, cost)
    _, logvar = pred.mean_logvar(x)
    sigma = np.exp(0.5 * logvar)
    cot = np.concatenate([c.sum(axis=0), (c * 0.5 * sigma * eps).sum(axis=0)])
    return GradientEstimate(pred.net.vjp(x, cot)[0], "gauss-reparam", Y.shape[0])


def gauss_score_grad(pred: GaussianPredictor, x, samples, sol, cost, cons, dF_dz) -> GradientEstimate:
    """Score-function gradient with the exact Gaussian log-likelihood."""
    Y = np.atleast_2d(samples)
    u_z = decision_adjoint(sol, Y, cost, cons, dF_dz)
    w = score_weights(u_z, Y, sol, cost)
    cot = w @ pred.score_cotangents(x, Y) / Y.shape[0]
    return GradientEstimate(pred.net.vjp(x, cot)[0], "gauss-score", Y.shape[0], w)


def deterministic_grad(net, x, sol, cost, cons, dF_dz) -> GradientEstimate:
    """Point-prediction DFL: the decision was solved on ``y_hat = net(x)`` alone."""
    y_hat = np.atleast_2d(net.forward(x))
    u_z = decision_adjoint(sol, y_hat, cost, cons, dF_dz)
    c = pathwise_cotangents(u_z, y_hat, sol, cost)[0]
    return GradientEstimate(net.vjp(x, c)[0], "deterministic", 1)
