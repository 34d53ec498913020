"""Sample-average decision layer with affine constraints.

Solves ``min_z (1/M) sum_i f(y_i, z)  s.t.  G z <= h,  A z = b`` with a
primal-dual path-following interior point method and exposes the KKT block
matrix used for implicit differentiation::

    K = [[H,        G^T,          A^T],
         [D(lam) G, D(G z - h),   0  ],
         [A,        0,            0  ]]

with ``H = (1/M) sum_i hess_zz f(y_i, z*)``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.optimize import linprog


SMOOTHING_FLOOR = 1e-6
KINK_TOL = 1e-7


class InfeasibleError(ValueError):
    """The constraint set is empty."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message, residuals):
        super().__init__(f"{message}; best residuals {residuals}")
        self.residuals = residuals


class DegenerateKKTError(np.linalg.LinAlgError):
    pass


@dataclass
class CostModel:
    """Decision cost callbacks, batched over samples.

    With ``Y`` of shape ``(M, dy)`` and ``z`` of shape ``(d,)``:
    ``value -> (M,)``, ``grad_z -> (M, d)``, ``hess_zz -> (M, d, d)`` and
    ``hess_zy -> (M, d, dy)`` where ``hess_zy[i, a, b] = d^2 f / dz_a dy_b``.

    ``smoothed(eps)`` is set for costs with kinks; it returns a C^2
    surrogate that the solver follows down to a tiny ``eps``.
    """

    value: Callable
    grad_z: Callable
    hess_zz: Callable
    hess_zy: Callable
    smoothed: Optional[Callable[[float], "CostModel"]] = None

    def mean_grad(self, Y, z):
        return self.grad_z(Y, z).mean(axis=0)

    def mean_hess(self, Y, z):
        return self.hess_zz(Y, z).mean(axis=0)


@dataclass(frozen=True, eq=False)
class AffineConstraints:
    G: np.ndarray
    h: np.ndarray
    A: np.ndarray
    b: np.ndarray

    @classmethod
    def build(cls, d, G=None, h=None, A=None, b=None):
        G = np.zeros((0, d)) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
        h = np.zeros(0) if h is None else np.asarray(h, dtype=float).ravel()
        A = np.zeros((0, d)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
        b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
        if G.shape != (h.size, d) or A.shape != (b.size, d):
            raise ValueError(f"inconsistent constraint shapes G{G.shape} h{h.shape} "
                             f"A{A.shape} b{b.shape} for d={d}")
        if b.size and np.linalg.matrix_rank(A) < b.size:
            raise ValueError("equality rows must be linearly independent")
        return cls(G, h, A, b)

    @property
    def d(self):
        return self.G.shape[1]

    @property
    def n(self):
        return self.h.size

    @property
    def p(self):
        return self.b.size

    def contains(self, z, atol=0.0):
        z = np.asarray(z, dtype=float)
        return bool(np.all(self.G @ z <= self.h + atol) and np.all(np.abs(self.A @ z - self.b) <= atol))

    @functools.cached_property
    def start_point(self):
        """A feasible point (LP phase one); raises InfeasibleError if none exists."""
        d = self.d
        if self.n == 0 and self.p == 0:
            return np.zeros(d)
        res = linprog(np.zeros(d),
                      A_ub=self.G if self.n else None, b_ub=self.h if self.n else None,
                      A_eq=self.A if self.p else None, b_eq=self.b if self.p else None,
                      bounds=[(None, None)] * d, method="highs")
        if res.status == 2:
            raise InfeasibleError("constraints G z <= h, A z = b admit no solution")
        if res.status != 0:
            raise InfeasibleError(f"feasibility check failed: {res.message}")
        return np.asarray(res.x, dtype=float)


@dataclass
class KKTSolution:
    z_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    slack: np.ndarray
    residuals: tuple
    iterations: int = 0
    smoothing: float = 0.0


def _residual_norms(gbar, z, lam, nu, cons):
    stat = gbar + cons.G.T @ lam + cons.A.T @ nu
    slack = cons.h - cons.G @ z
    primal = max(np.max(-slack, initial=0.0), np.max(np.abs(cons.A @ z - cons.b), initial=0.0))
    comp = np.max(np.abs(lam * slack), initial=0.0)
    return float(np.max(np.abs(stat), initial=0.0)), float(primal), float(comp)


def kkt_residuals(sol: KKTSolution, samples, cost: CostModel, cons: AffineConstraints):
    """Infinity norms of (stationarity, primal infeasibility, complementarity)."""
    Y = np.atleast_2d(samples)
    return _residual_norms(cost.mean_grad(Y, sol.z_star), sol.z_star, sol.lambda_star,
                           sol.nu_star, cons)


def _ipm(Y, cost, cons, z, s, lam, nu, tol, max_iter, sigma=0.1):
    G, h, A, b = cons.G, cons.h, cons.A, cons.b
    d, n, p = cons.d, cons.n, cons.p
    best = (np.inf,) * 3
    stalled = 0
    for it in range(max_iter + 1):
        g = cost.mean_grad(Y, z)
        r_d = g + G.T @ lam + A.T @ nu
        r_s = G @ z + s - h
        r_p = A @ z - b
        gap = lam @ s / n if n else 0.0
        res = (float(np.max(np.abs(r_d), initial=0.0)),
               float(max(np.max(np.abs(r_s), initial=0.0), np.max(np.abs(r_p), initial=0.0))),
               float(np.max(lam * s, initial=0.0)))
        if max(res) < max(best):
            best = res
        if max(res) <= tol:
            return z, s, lam, nu, it
        if it == max_iter:
            break
        mu = sigma * gap
        r_c = lam * s - mu
        H = cost.mean_hess(Y, z)
        # unknowns [dz, ds, dlam, dnu]
        N = d + 2 * n + p
        K = np.zeros((N, N))
        K[:d, :d] = H
        K[:d, d + n:d + 2 * n] = G.T
        K[:d, d + 2 * n:] = A.T
        K[d:d + n, :d] = G
        K[d:d + n, d:d + n] = np.eye(n)
        K[d + n:d + 2 * n, d:d + n] = np.diag(lam)
        K[d + n:d + 2 * n, d + n:d + 2 * n] = np.diag(s)
        K[d + 2 * n:, :d] = A
        rhs = -np.concatenate([r_d, r_s, r_c, r_p])
        try:
            step = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(K, rhs, rcond=None)[0]
        dz, ds = step[:d], step[d:d + n]
        dlam, dnu = step[d + n:d + 2 * n], step[d + 2 * n:]
        alpha = 1.0
        for v, dv in ((s, ds), (lam, dlam)):
            neg = dv < 0
            if np.any(neg):
                alpha = min(alpha, 0.99 * np.min(-v[neg] / dv[neg]))

        def merit(z_, s_, lam_, nu_):
            rd = cost.mean_grad(Y, z_) + G.T @ lam_ + A.T @ nu_
            return np.sqrt(rd @ rd + np.sum((G @ z_ + s_ - h) ** 2) + np.sum((A @ z_ - b) ** 2)
                           + np.sum((lam_ * s_ - mu) ** 2))

        phi0 = np.sqrt(r_d @ r_d + r_s @ r_s + r_p @ r_p + r_c @ r_c)
        while True:
            cand = (z + alpha * dz, s + alpha * ds, lam + alpha * dlam, nu + alpha * dnu)
            phi = merit(*cand)
            if np.isfinite(phi) and (phi <= (1.0 - 1e-4 * alpha) * phi0 or alpha < 1e-10):
                break
            alpha *= 0.5
        stalled = stalled + 1 if alpha < 1e-10 else 0
        if stalled >= 3:
            break
        z, s, lam, nu = cand
    raise NonConvergenceError(f"interior point stopped after {it} iterations", best)


def solve_saa(samples, cost: CostModel, cons: AffineConstraints, tol=1e-8, max_iter=200,
              z0=None) -> KKTSolution:
    """Solve the sample-average problem to KKT tolerance ``tol``.

    Costs with kinks (``cost.smoothed`` set) are solved along a sequence of
    C^2 surrogates with vanishing smoothing; the returned residuals are those
    of the final surrogate.
    """
    Y = np.atleast_2d(np.asarray(samples, dtype=float))
    if Y.shape[0] < 1:
        raise ValueError("need at least one sample")
    d, n = cons.d, cons.n
    z = cons.start_point.copy() if z0 is None else np.asarray(z0, dtype=float).copy()
    s = np.maximum(cons.h - cons.G @ z, 1.0)
    lam = 1.0 / s
    nu = np.zeros(cons.p)
    if cost.smoothed is None:
        stages = [(cost, tol)]
    else:
        # float resolution of a kink gradient is ~ slope * ulp(z) / eps, so the
        # continuation stops at SMOOTHING_FLOOR. Intermediate stages are solved
        # well below their smoothing scale: a loosely centred warm start (large
        # multipliers on an inactive bound) stalls Newton among dense kinks.
        eps_list = [10.0 ** -k for k in range(1, 7)]
        stages = [(cost.smoothed(e), max(tol, 1e-2 * e)) for e in eps_list[:-1]]
        stages.append((cost.smoothed(SMOOTHING_FLOOR), max(tol, KINK_TOL)))
    total = 0
    for i, (stage_cost, stage_tol) in enumerate(stages):
        if i:
            # keep the warm start off the boundary so the next stage can move
            s, lam = np.maximum(s, stage_tol), np.maximum(lam, stage_tol)
        z, s, lam, nu, its = _ipm(Y, stage_cost, cons, z, s, lam, nu, stage_tol, max_iter)
        total += its
    final_cost = stages[-1][0]
    sol = KKTSolution(z, lam, nu, cons.h - cons.G @ z, (), total,
                      0.0 if cost.smoothed is None else SMOOTHING_FLOOR)
    sol.residuals = kkt_residuals(sol, Y, final_cost, cons)
    return sol


@dataclass
class KKTFactorization:
    matrix: np.ndarray
    lu: tuple
    regularization: float
    dims: tuple
    base: np.ndarray = field(repr=False, default=None)
    # ``lu`` factors ``diag(row_scale) @ matrix``; None means no scaling
    row_scale: np.ndarray = field(repr=False, default=None)

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self.row_scale is not None:
            rhs = self.row_scale.reshape((-1,) + (1,) * (rhs.ndim - 1)) * rhs
        return scipy.linalg.lu_solve(self.lu, rhs)

    def solve_transpose(self, rhs):
        out = scipy.linalg.lu_solve(self.lu, rhs, trans=1)
        if self.row_scale is not None:
            out = self.row_scale.reshape((-1,) + (1,) * (out.ndim - 1)) * out
        return out


def kkt_matrix(H, sol: KKTSolution, cons: AffineConstraints):
    d, n, p = cons.d, cons.n, cons.p
    K = np.zeros((d + n + p, d + n + p))
    K[:d, :d] = H
    K[:d, d:d + n] = cons.G.T
    K[:d, d + n:] = cons.A.T
    K[d:d + n, :d] = sol.lambda_star[:, None] * cons.G
    K[d:d + n, d:d + n] = np.diag(cons.G @ sol.z_star - cons.h)
    K[d + n:, :d] = cons.A
    return K


def _row_scale(K):
    scale = np.max(np.abs(K), axis=1)
    scale[scale == 0.0] = 1.0
    return 1.0 / scale


def assemble_kkt(sol: KKTSolution, samples, cost: CostModel, cons: AffineConstraints,
                 max_cond=1e12) -> KKTFactorization:
    """Build and LU-factor the KKT matrix at ``sol``.

    A numerically singular matrix gets a Tikhonov shift ``delta * I`` with
    ``delta`` escalating 1e-10, 1e-9, ..., 1e-6.
    """
    Y = np.atleast_2d(samples)
    H = cost.mean_hess(Y, sol.z_star)
    K = kkt_matrix(H, sol, cons)
    dims = (cons.d, cons.n, cons.p)
    if K.size == 0:
        raise ValueError("empty decision")
    delta = 0.0
    Kr = K
    while True:
        # equilibrated rows: complementarity rows scale with lambda and the slack
        r = _row_scale(Kr)
        Ks = r[:, None] * Kr
        cond = np.linalg.cond(Ks)
        if np.isfinite(cond) and cond <= max_cond:
            return KKTFactorization(Kr, scipy.linalg.lu_factor(Ks), delta, dims, K, r)
        delta = 1e-10 if delta == 0.0 else delta * 10.0
        if delta > 1e-6 * (1 + 1e-9):
            raise DegenerateKKTError(f"KKT matrix singular even with regularization 1e-6 "
                                     f"(condition {cond:.3g})")
        Kr = K + delta * np.eye(K.shape[0])


def adjoint_solve(fac: KKTFactorization, dF_dz):
    """Row vector ``u`` with ``u^T K = -[dF_dz; 0; 0]^T``."""
    d = fac.dims[0]
    e = np.zeros(fac.matrix.shape[0])
    e[:d] = dF_dz
    return fac.solve_transpose(-e)
