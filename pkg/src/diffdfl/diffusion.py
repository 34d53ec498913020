"""Conditional DDPM pieces: schedule, noising, replayable reverse sampling,
denoising loss and the importance-sampled ELBO gradient.

Arrays are batched along the leading axis: ``y`` has shape ``(batch, dy)``
(a single ``(dy,)`` vector is accepted everywhere), ``x`` is either one
context ``(dx,)`` shared by the batch or ``(batch, dx)``.  Timesteps run
``1..T``; schedule arrays are stored 0-based, so step ``t`` lives at index
``t - 1``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .nn import DenseNet, ParamVector, TimeEmbedding


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self):
        return self.beta.size

    def check_t(self, t):
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return t_arr.astype(int)


def build_schedule(T: int, beta_min=1e-4, beta_max=0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for i in range(T):
        acc = acc * alpha[i]
        alpha_bar[i] = acc
    return NoiseSchedule(beta, alpha, alpha_bar, np.sqrt(beta))


def _rows(y):
    y = np.asarray(y, dtype=float)
    return y.ndim == 1, np.atleast_2d(y)


def _context(x, batch):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.broadcast_to(x, (batch, x.size))
    return x


def _timesteps(t, batch):
    t = np.asarray(t, dtype=int)
    return np.broadcast_to(t, (batch,)) if t.ndim == 0 else t


class EpsilonModel:
    """Noise predictor ``eps_theta(y_t, t, x)``: an MLP over ``[y_t, emb(t), x]``."""

    def __init__(self, y_dim, x_dim, hidden=(64, 64), embed_dim=16, proj_dim=32,
                 activation="silu", params: ParamVector | None = None, rng=None):
        self.y_dim, self.x_dim = int(y_dim), int(x_dim)
        self.params = ParamVector() if params is None else params
        self.time_embed = TimeEmbedding(self.params, embed_dim, proj_dim, "eps.temb", rng)
        width_in = self.y_dim + proj_dim + self.x_dim
        self.trunk = DenseNet([width_in, *hidden, self.y_dim], self.params, activation,
                              "eps.trunk", rng)

    def _inputs(self, y, t, x):
        batch = y.shape[0]
        t = _timesteps(t, batch)
        h = self.time_embed.forward(t)
        return t, np.concatenate([y, h, _context(x, batch)], axis=1)

    def eps(self, y_t, t, x):
        single, y = _rows(y_t)
        _, inp = self._inputs(y, t, x)
        out = self.trunk.forward(inp)
        return out[0] if single else out

    def vjp(self, y_t, t, x, cotangent, per_example=False, row_scale=None, sq_norms=False):
        """``(param_grad, grad wrt y_t)`` of ``cotangent . eps_theta``.

        ``row_scale`` and ``sq_norms`` behave as in :meth:`DenseNet.vjp`.
        """
        single, y = _rows(y_t)
        cot = np.atleast_2d(cotangent)
        t_rows, inp = self._inputs(y, t, x)
        out = self.trunk.vjp(inp, cot, per_example, row_scale, sq_norms)
        g_trunk, g_in = out[0], out[1]
        dy, p = self.y_dim, self.time_embed.out_dim
        emb = self.time_embed.vjp(t_rows, g_in[:, dy:dy + p], per_example, row_scale, sq_norms)
        g_emb = emb[0] if sq_norms else emb
        grad = g_trunk + g_emb
        g_y = g_in[:, :dy]
        if single:
            res = (grad[0] if per_example else grad), g_y[0]
        else:
            res = grad, g_y
        if sq_norms:
            norms = out[2] + emb[1]
            res = res + ((norms[0] if single else norms),)
        return res


class LinearEpsilonModel:
    """Per-step affine noise predictor ``A_t y_t + B_t x + c_t``."""

    def __init__(self, y_dim, x_dim, T, params: ParamVector | None = None, rng=None, scale=0.1):
        self.y_dim, self.x_dim, self.T = int(y_dim), int(x_dim), int(T)
        self.params = ParamVector() if params is None else params
        init = (lambda *s: None) if rng is None else (lambda *s: scale * rng.normal(size=s))
        self.params.reserve("lin.A", (T, y_dim, y_dim), init(T, y_dim, y_dim))
        self.params.reserve("lin.B", (T, y_dim, x_dim), init(T, y_dim, x_dim))
        self.params.reserve("lin.c", (T, y_dim), init(T, y_dim))

    def blocks(self, values=None):
        pv = self.params
        return pv.view("lin.A", values), pv.view("lin.B", values), pv.view("lin.c", values)

    def eps(self, y_t, t, x):
        single, y = _rows(y_t)
        idx = _timesteps(t, y.shape[0]) - 1
        A, B, c = self.blocks()
        xc = _context(x, y.shape[0])
        out = (np.einsum("bij,bj->bi", A[idx], y) + np.einsum("bij,bj->bi", B[idx], xc)
               + c[idx])
        return out[0] if single else out

    def vjp(self, y_t, t, x, cotangent, per_example=False, row_scale=None, sq_norms=False):
        single, y = _rows(y_t)
        cot = np.atleast_2d(cotangent)
        batch = y.shape[0]
        idx = _timesteps(t, batch) - 1
        xc = _context(x, batch)
        A, _, _ = self.blocks()
        g_y = np.einsum("bji,bj->bi", A[idx], cot)
        norms = (np.einsum("ij,ij->i", cot, cot)
                 * (1.0 + np.einsum("ij,ij->i", y, y) + np.einsum("ij,ij->i", xc, xc)))
        if row_scale is not None:
            cot = cot * np.asarray(row_scale, dtype=float).reshape(batch, 1)
        gA_rows = cot[:, :, None] * y[:, None, :]
        gB_rows = cot[:, :, None] * xc[:, None, :]
        if per_example:
            grad = np.zeros((batch, len(self.params)))
            gA, gB, gc = self.blocks(grad)
            rows = np.arange(batch)
            gA[rows, idx] = gA_rows
            gB[rows, idx] = gB_rows
            gc[rows, idx] = cot
        else:
            grad = self.params.zeros()
            gA, gB, gc = self.blocks(grad)
            np.add.at(gA, idx, gA_rows)
            np.add.at(gB, idx, gB_rows)
            np.add.at(gc, idx, cot)
        if single:
            res = (grad[0] if per_example else grad), g_y[0]
            return res + (norms[0],) if sq_norms else res
        return (grad, g_y, norms) if sq_norms else (grad, g_y)


def forward_noise(y0, t, eps, sched: NoiseSchedule):
    """Closed-form ``q(y_t | y_0)`` draw: ``sqrt(ab_t) y0 + sqrt(1 - ab_t) eps``."""
    t = sched.check_t(t)
    y0 = np.asarray(y0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if y0.shape[-1] != eps.shape[-1]:
        raise ValueError("y0 and eps dimension mismatch")
    ab = sched.alpha_bar[t - 1]
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps


def reverse_mean(model, y_t, t, x, sched: NoiseSchedule):
    """``mu_theta = (y_t - beta_t / sqrt(1 - ab_t) * eps_theta) / sqrt(alpha_t)``."""
    i = t - 1
    coef = sched.beta[i] / np.sqrt(1.0 - sched.alpha_bar[i])
    return (y_t - coef * model.eps(y_t, t, x)) / np.sqrt(sched.alpha[i])


def reverse_mean_vjp(model, y_t, t, x, v, sched: NoiseSchedule):
    """``(A_t^T v, J_t^T v)`` for the reverse mean at step ``t`` (scalar ``t``)."""
    i = t - 1
    inv_sqrt_a = 1.0 / np.sqrt(sched.alpha[i])
    coef = sched.beta[i] / np.sqrt(1.0 - sched.alpha_bar[i])
    g_param, g_y = model.vjp(y_t, t, x, -coef * inv_sqrt_a * v)
    return g_param, inv_sqrt_a * v + g_y


@dataclass
class Trajectory:
    """Reverse-chain record.  ``states[t]`` is ``y_t`` for ``t = 0..T`` and
    ``noises[t]`` is the draw injected into ``y_t`` (``noises[T]`` is the
    prior sample itself).  Leading batch axes are kept as given."""

    states: np.ndarray
    noises: np.ndarray
    context: np.ndarray

    @property
    def y0(self):
        return self.states[0]


def reverse_sample(model, x, noises, sched: NoiseSchedule) -> Trajectory:
    noises = np.asarray(noises, dtype=float)
    T = sched.T
    if noises.shape[0] != T + 1 or noises.shape[-1] != model.y_dim:
        raise ValueError(f"noises must have shape (T+1, ..., {model.y_dim}), got {noises.shape}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.x_dim:
        raise ValueError(f"context width {x.shape[-1]} != model x_dim {model.x_dim}")
    states = np.empty_like(noises)
    states[T] = noises[T]
    for t in range(T, 0, -1):
        y_prev = reverse_mean(model, states[t], t, x, sched)
        if t > 1:
            y_prev = y_prev + sched.sigma[t - 1] * noises[t - 1]
        states[t - 1] = y_prev
    return Trajectory(states, noises, x)


def sample(model, x, count, rng: np.random.Generator, sched: NoiseSchedule) -> Trajectory:
    """Draw ``count`` samples given one context ``x``; noises come from ``rng``."""
    noises = rng.standard_normal((sched.T + 1, count, model.y_dim))
    return reverse_sample(model, x, noises, sched)


def trajectory_vjp(model, traj: Trajectory, cotangent, sched: NoiseSchedule):
    """Parameter gradient of ``sum_i cotangent_i . y0_i`` through the sampler.

    Walks the chain from ``y_0`` back to ``y_T``: at step ``t`` the running
    cotangent ``v`` (on ``y_{t-1}``) contributes ``A_t^T v`` and becomes
    ``J_t^T v``; the injected noises are constants.
    """
    v = np.asarray(cotangent, dtype=float)
    grad = model.params.zeros()
    for t in range(1, sched.T + 1):
        g_param, v = reverse_mean_vjp(model, traj.states[t], t, traj.context, v, sched)
        grad += g_param
    return grad


def elbo_simplified(model, y0, x, t, eps, sched: NoiseSchedule):
    """Denoising error ``||eps - eps_theta(y_t, t, x)||^2`` (per row when batched)."""
    y_t = forward_noise(y0, t, eps, sched)
    r = np.asarray(eps, dtype=float) - model.eps(y_t, t, x)
    return np.sum(r * r, axis=-1)


def elbo_simplified_grad(model, y0, x, t, eps, sched: NoiseSchedule, per_example=False):
    """Parameter gradient of :func:`elbo_simplified` (summed over rows)."""
    y_t = forward_noise(y0, t, eps, sched)
    r = np.asarray(eps, dtype=float) - model.eps(y_t, t, x)
    return model.vjp(y_t, t, x, -2.0 * r, per_example)[0]


class TimestepSampler:
    """Loss-aware timestep distribution for the ELBO gradient.

    Keeps a ring buffer of the last ``history`` squared gradient norms per
    step and samples ``t`` with ``p_t`` proportional to the root of their
    mean, mixed with a small uniform floor.  Until every step has a full
    buffer the distribution is uniform.  Not thread-safe; give each worker
    its own sampler.
    """

    def __init__(self, T, history=10, uniform_prob=1e-3, adaptive=True):
        self.T = int(T)
        self.history_size = history
        self.uniform_prob = uniform_prob
        self.adaptive = adaptive
        self.history = [deque(maxlen=history) for _ in range(self.T)]

    @property
    def warm(self):
        return np.array([len(h) >= self.history_size for h in self.history])

    def probabilities(self):
        if not self.adaptive or not self.warm.all():
            return np.full(self.T, 1.0 / self.T)
        w = np.sqrt(np.array([np.mean(h) for h in self.history]))
        if not np.isfinite(w).all() or w.sum() <= 0.0:
            return np.full(self.T, 1.0 / self.T)
        p = w / w.sum()
        p = p * (1.0 - self.uniform_prob) + self.uniform_prob / self.T
        return p / p.sum()

    def sample(self, rng: np.random.Generator, size):
        """Return ``(timesteps, probabilities of those timesteps)``."""
        p = self.probabilities()
        idx = rng.choice(self.T, size=size, p=p)
        return idx + 1, p[idx]

    def record(self, t, sq_norm):
        for ti, s in zip(np.atleast_1d(t), np.atleast_1d(sq_norm)):
            self.history[int(ti) - 1].append(float(s))

    def state(self):
        return [list(h) for h in self.history]


def elbo_grad(model, y0, x, sampler: TimestepSampler, k, rng: np.random.Generator,
              sched: NoiseSchedule, per_example=False, chunk=256, weights=None):
    """Importance-sampled gradient of the simplified ELBO, the score surrogate.

    The ELBO is the negated denoising error averaged over ``t ~ U{1..T}``, so
    each of the ``k`` draws ``t ~ p`` is weighted by ``(1/T) / p_t``; under a
    uniform ``p`` the weights are 1 and the result is the plain average of
    per-step gradients.  Every per-step squared gradient norm is recorded
    into ``sampler``.

    ``y0`` may be a batch; the result is then summed over rows, or returned
    per row (``(batch, P)``) with ``per_example``.  ``weights`` (one per row
    of ``y0``) gives the weighted sum ``sum_i weights_i g_i`` in a single
    pass; the weights are constants here.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    single, Y = _rows(y0)
    batch = Y.shape[0]
    xc = _context(x, batch)
    if weights is not None:
        weights = np.asarray(weights, dtype=float).reshape(batch)
        if per_example:
            raise ValueError("weights and per_example are exclusive")
    ts, probs = sampler.sample(rng, (batch, k))
    eps = rng.standard_normal((batch, k, Y.shape[1]))
    is_w = (1.0 / sampler.T) / probs / k
    P = len(model.params)
    out = np.zeros((batch, P)) if per_example else np.zeros(P)
    rows_t = ts.reshape(-1)
    rows_w = is_w.reshape(-1)
    if weights is not None:
        rows_w = rows_w * np.repeat(weights, k)
    rows_eps = eps.reshape(-1, Y.shape[1])
    rows_y = np.repeat(Y, k, axis=0)
    rows_x = np.repeat(xc, k, axis=0)
    owner = np.repeat(np.arange(batch), k)
    for lo in range(0, rows_t.size, chunk):
        sl = slice(lo, lo + chunk)
        y_t = forward_noise(rows_y[sl], rows_t[sl], rows_eps[sl], sched)
        r = rows_eps[sl] - model.eps(y_t, rows_t[sl], rows_x[sl])
        # cotangent of -||r||^2 wrt eps_theta
        cot = 2.0 * r
        if per_example:
            g, _, sq = model.vjp(y_t, rows_t[sl], rows_x[sl], cot, per_example=True, sq_norms=True)
            np.add.at(out, owner[sl], g * rows_w[sl, None])
        else:
            g, _, sq = model.vjp(y_t, rows_t[sl], rows_x[sl], cot, row_scale=rows_w[sl],
                                 sq_norms=True)
            out += g
        sampler.record(rows_t[sl], sq)
    if single and per_example:
        return out[0]
    return out
