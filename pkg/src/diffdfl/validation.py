"""Independent oracles: central differences, the closed-form density of a
linear-noise-predictor diffusion model and its exact parameter score, and
vector comparison helpers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import LinearEpsilonModel, NoiseSchedule


def fd_grad(objective, theta, step=1e-5):
    """Central-difference gradient of a scalar ``objective`` at ``theta``."""
    theta = np.array(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        f_plus = objective(theta.copy())
        theta[i] = orig - step
        f_minus = objective(theta.copy())
        theta[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"objective not finite at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def rel_error(a, b):
    """``|a - b| / max(|a|, |b|)`` in the infinity norm (0 when both vanish)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    return 0.0 if scale == 0.0 else float(np.max(np.abs(a - b), initial=0.0) / scale)


def cosine(u, v):
    u, v = np.ravel(u).astype(float), np.ravel(v).astype(float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass
class LinearDiffusionOracle:
    """Closed-form view of a diffusion model with ``eps = A_t y + B_t x + c_t``.

    Each reverse step is affine, ``y_{t-1} = L_t y_t + m_t(x) + sigma_t xi``
    with ``L_t = (I - k_t A_t) / sqrt(alpha_t)``,
    ``m_t = -k_t (B_t x + c_t) / sqrt(alpha_t)`` and
    ``k_t = beta_t / sqrt(1 - alpha_bar_t)``, so ``y_0 | x`` is Gaussian.
    ``W`` is the data map of the matching ground truth ``y ~ N(W x, I)``.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    sched: NoiseSchedule
    W: np.ndarray = None

    @classmethod
    def from_model(cls, model: LinearEpsilonModel, sched: NoiseSchedule, W=None):
        A, B, c = (np.array(b) for b in model.blocks())
        return cls(A, B, c, sched, W)

    @classmethod
    def near_optimal(cls, W, sched: NoiseSchedule):
        """Parameters of the optimal noise predictor for data ``N(W x, I)``.

        Then ``y_t ~ N(sqrt(ab_t) W x, I)`` and
        ``E[eps | y_t] = sqrt(1 - ab_t) (y_t - sqrt(ab_t) W x)``.
        """
        W = np.atleast_2d(np.asarray(W, dtype=float))
        dy, dx = W.shape
        s = np.sqrt(1.0 - sched.alpha_bar)
        A = s[:, None, None] * np.eye(dy)
        B = -(s * np.sqrt(sched.alpha_bar))[:, None, None] * W
        return cls(A, B, np.zeros((sched.T, dy)), sched, W)

    def flat(self):
        """Parameters in the order of :class:`LinearEpsilonModel`."""
        return np.concatenate([self.A.ravel(), self.B.ravel(), self.c.ravel()])

    def with_flat(self, theta):
        T, dy, dx = self.B.shape
        nA, nB = T * dy * dy, T * dy * dx
        theta = np.asarray(theta, dtype=float)
        return LinearDiffusionOracle(theta[:nA].reshape(T, dy, dy),
                                     theta[nA:nA + nB].reshape(T, dy, dx),
                                     theta[nA + nB:].reshape(T, dy), self.sched, self.W)

    def _steps(self, x):
        sched = self.sched
        dy = self.A.shape[1]
        x = np.asarray(x, dtype=float)
        k = sched.beta / np.sqrt(1.0 - sched.alpha_bar)
        ra = np.sqrt(sched.alpha)
        L = (np.eye(dy) - k[:, None, None] * self.A) / ra[:, None, None]
        m = -(k / ra)[:, None] * (self.B @ x + self.c)
        return L, m, k / ra

    def _propagate(self, x):
        """Means and covariances of ``y_t`` for ``t = T..0`` (index ``t``)."""
        L, m, _ = self._steps(x)
        T, dy = self.A.shape[0], self.A.shape[1]
        means = np.zeros((T + 1, dy))
        covs = np.zeros((T + 1, dy, dy))
        covs[T] = np.eye(dy)
        for t in range(T, 0, -1):
            i = t - 1
            means[t - 1] = L[i] @ means[t] + m[i]
            cov = L[i] @ covs[t] @ L[i].T
            if t > 1:
                cov = cov + self.sched.sigma[i] ** 2 * np.eye(dy)
            covs[t - 1] = 0.5 * (cov + cov.T)
        return means, covs, L

    def density(self, x):
        means, covs, _ = self._propagate(x)
        return means[0], covs[0]

    def log_density(self, x, y0):
        mean, cov = self.density(x)
        chol = _chol(cov)
        r = np.linalg.solve(chol, np.asarray(y0, dtype=float) - mean)
        dy = mean.size
        return float(-0.5 * r @ r - np.sum(np.log(np.diag(chol))) - 0.5 * dy * np.log(2 * np.pi))

    def score(self, x, y0):
        """``grad log p(y0 | x)`` over ``(A, B, c)``, flattened like :meth:`flat`.

        Reverse mode through the mean/covariance recursion: with ``g`` and
        ``Gs`` the adjoints of the mean and covariance of ``y_{t-1}``,
        ``dL_t = g mean_t^T + 2 Gs L_t cov_t``, then ``g <- L_t^T g`` and
        ``Gs <- L_t^T Gs L_t``.
        """
        x = np.asarray(x, dtype=float)
        means, covs, L = self._propagate(x)
        _, _, scale = self._steps(x)
        S = covs[0]
        chol = _chol(S)
        S_inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(S.shape[0])))
        a = S_inv @ (np.asarray(y0, dtype=float) - means[0])
        g = a
        Gs = 0.5 * (np.outer(a, a) - S_inv)
        T = self.A.shape[0]
        gA = np.zeros_like(self.A)
        gB = np.zeros_like(self.B)
        gc = np.zeros_like(self.c)
        for t in range(1, T + 1):
            i = t - 1
            dL = np.outer(g, means[t]) + 2.0 * Gs @ L[i] @ covs[t]
            gA[i] = -scale[i] * dL
            gc[i] = -scale[i] * g
            gB[i] = -scale[i] * np.outer(g, x)
            g = L[i].T @ g
            Gs = L[i].T @ Gs @ L[i]
        return np.concatenate([gA.ravel(), gB.ravel(), gc.ravel()])


def _chol(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("covariance of y0 is not positive definite") from None


def linear_gaussian_density(oracle: LinearDiffusionOracle, x):
    """``(mean, covariance)`` of ``p(y0 | x)`` for the linear model."""
    mean, cov = oracle.density(x)
    _chol(cov)
    return mean, cov


def linear_gaussian_score(oracle: LinearDiffusionOracle, x, y0):
    return oracle.score(x, y0)
