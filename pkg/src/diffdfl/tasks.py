"""Benchmark decision problems, data generators and the CSV dataset format.

Hinge terms ``[v]_+`` use the derivative convention ``1{v > 0}``; their
kinks add nothing to second derivatives.  Each kinked cost also exposes a
smoothed surrogate (``[v]_+ ~ (v + sqrt(v^2 + eps^2)) / 2``) that only the
solver uses.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .decision import AffineConstraints, CostModel


def _hinge(v, eps):
    if eps == 0.0:
        return np.maximum(v, 0.0), (v > 0.0).astype(float), np.zeros_like(v)
    r = np.sqrt(v * v + eps * eps)
    return 0.5 * (v + r), 0.5 * (1.0 + v / r), 0.5 * eps * eps / r ** 3


# ---------------------------------------------------------------- factory

@dataclass(frozen=True)
class FactoryTask:
    d: int = 1
    C: float = 2.0

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("capacity C must be positive")


def factory_callbacks(task: FactoryTask):
    """``f(y, z) = exp(-y.z)`` on the box ``0 <= z <= C``."""
    d = task.d
    eye = np.eye(d)

    def value(Y, z):
        return np.exp(-np.atleast_2d(Y) @ z)

    def grad_z(Y, z):
        Y = np.atleast_2d(Y)
        return -value(Y, z)[:, None] * Y

    def hess_zz(Y, z):
        Y = np.atleast_2d(Y)
        return value(Y, z)[:, None, None] * Y[:, :, None] * Y[:, None, :]

    def hess_zy(Y, z):
        Y = np.atleast_2d(Y)
        return value(Y, z)[:, None, None] * (Y[:, :, None] * z[None, None, :] - eye)

    cons = AffineConstraints.build(d, G=np.vstack([-eye, eye]),
                                   h=np.concatenate([np.zeros(d), np.full(d, task.C)]))
    return CostModel(value, grad_z, hess_zz, hess_zy), cons


# ---------------------------------------------------------------- power

@dataclass(frozen=True)
class PowerTask:
    horizon: int = 24
    gamma_s: float = 50.0
    gamma_e: float = 0.5
    c_r: float = 0.4

    def __post_init__(self):
        if min(self.gamma_s, self.gamma_e, self.c_r) <= 0:
            raise ValueError("gamma_s, gamma_e and c_r must be positive")


def _power_cost(task: PowerTask, eps: float) -> CostModel:
    gs, ge, n = task.gamma_s, task.gamma_e, task.horizon
    eye = np.eye(n)

    def value(Y, z):
        Y = np.atleast_2d(Y)
        short, _, _ = _hinge(Y - z, eps)
        excess, _, _ = _hinge(z - Y, eps)
        return np.sum(gs * short + ge * excess + 0.5 * (z - Y) ** 2, axis=1)

    def grad_z(Y, z):
        Y = np.atleast_2d(Y)
        _, ds, _ = _hinge(Y - z, eps)
        _, de, _ = _hinge(z - Y, eps)
        return -gs * ds + ge * de + (z - Y)

    def hess_zz(Y, z):
        Y = np.atleast_2d(Y)
        _, _, hs = _hinge(Y - z, eps)
        _, _, he = _hinge(z - Y, eps)
        diag = 1.0 + gs * hs + ge * he
        return diag[:, :, None] * eye

    def hess_zy(Y, z):
        Y = np.atleast_2d(Y)
        _, _, hs = _hinge(Y - z, eps)
        _, _, he = _hinge(z - Y, eps)
        diag = -(1.0 + gs * hs + ge * he)
        return diag[:, :, None] * eye

    smoothed = (lambda e: _power_cost(task, e)) if eps == 0.0 else None
    return CostModel(value, grad_z, hess_zz, hess_zy, smoothed)


def ramp_matrix(n):
    """Rows ``z_i - z_{i-1}`` for ``i = 1..n-1``."""
    D = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    D[idx, idx] = -1.0
    D[idx, idx + 1] = 1.0
    return D


def power_callbacks(task: PowerTask):
    """Shortage/excess hinges plus quadratic tracking; ramp limits ``|z_i - z_{i-1}| <= c_r``."""
    n = task.horizon
    if math.isinf(task.c_r) or n < 2:
        cons = AffineConstraints.build(n)
    else:
        D = ramp_matrix(n)
        cons = AffineConstraints.build(n, G=np.vstack([D, -D]), h=np.full(2 * (n - 1), task.c_r))
    return _power_cost(task, 0.0), cons


# ---------------------------------------------------------------- portfolio

@dataclass(frozen=True)
class PortfolioTask:
    n: int = 10
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("risk parameter alpha must be positive")


def portfolio_callbacks(task: PortfolioTask):
    """``(alpha/2) (y.z)^2 - y.z`` over the simplex ``1.z = 1, 0 <= z <= 1``."""
    n, a = task.n, task.alpha
    eye = np.eye(n)

    def value(Y, z):
        r = np.atleast_2d(Y) @ z
        return 0.5 * a * r * r - r

    def grad_z(Y, z):
        Y = np.atleast_2d(Y)
        r = Y @ z
        return (a * r - 1.0)[:, None] * Y

    def hess_zz(Y, z):
        Y = np.atleast_2d(Y)
        return a * Y[:, :, None] * Y[:, None, :]

    def hess_zy(Y, z):
        Y = np.atleast_2d(Y)
        r = Y @ z
        return a * (Y[:, :, None] * z[None, None, :] + r[:, None, None] * eye) - eye

    cons = AffineConstraints.build(n, G=np.vstack([eye, -eye]),
                                   h=np.concatenate([np.ones(n), np.zeros(n)]),
                                   A=np.ones((1, n)), b=np.ones(1))
    return CostModel(value, grad_z, hess_zz, hess_zy), cons


# ---------------------------------------------------------------- inventory

@dataclass(frozen=True)
class InventoryTask:
    c0: float = 0.5
    q0: float = 0.1
    cb: float = 4.0
    rb: float = 0.5
    ch: float = 1.0
    rh: float = 0.1
    z_max: float = 6.0

    def __post_init__(self):
        if self.q0 < 0 or self.rb < 0 or self.rh < 0:
            raise ValueError("q0, rb and rh must be non-negative for convexity")


def _inventory_cost(task: InventoryTask, eps: float) -> CostModel:
    c0, q0, cb, rb, ch, rh = task.c0, task.q0, task.cb, task.rb, task.ch, task.rh

    def parts(Y, z):
        Y = np.atleast_2d(Y)[:, :1]
        under = np.maximum(Y - z, 0.0)
        over = np.maximum(z - Y, 0.0)
        return Y, under, over

    def value(Y, z):
        Y, under, over = parts(Y, z)
        lin_u, _, _ = _hinge(Y - z, eps)
        lin_o, _, _ = _hinge(z - Y, eps)
        out = (c0 * z + 0.5 * q0 * z * z + cb * lin_u + rb / 3.0 * under ** 3
               + ch * lin_o + rh / 3.0 * over ** 3)
        return out[:, 0]

    def grad_z(Y, z):
        Y, under, over = parts(Y, z)
        _, du, _ = _hinge(Y - z, eps)
        _, do, _ = _hinge(z - Y, eps)
        return c0 + q0 * z - cb * du - rb * under ** 2 + ch * do + rh * over ** 2

    def hess_zz(Y, z):
        Y, under, over = parts(Y, z)
        _, _, hu = _hinge(Y - z, eps)
        _, _, ho = _hinge(z - Y, eps)
        h = q0 + 2.0 * rb * under + 2.0 * rh * over + cb * hu + ch * ho
        return h[:, :, None]

    def hess_zy(Y, z):
        Y, under, over = parts(Y, z)
        _, _, hu = _hinge(Y - z, eps)
        _, _, ho = _hinge(z - Y, eps)
        h = -2.0 * rb * under - 2.0 * rh * over - cb * hu - ch * ho
        return h[:, :, None]

    smoothed = (lambda e: _inventory_cost(task, e)) if eps == 0.0 else None
    return CostModel(value, grad_z, hess_zz, hess_zy, smoothed)


def inventory_callbacks(task: InventoryTask):
    """Newsvendor cost with quadratic order cost and cubic hinge penalties, ``0 <= z <= z_max``."""
    cons = AffineConstraints.build(1, G=np.array([[-1.0], [1.0]]), h=np.array([0.0, task.z_max]))
    return _inventory_cost(task, 0.0), cons


TASKS = {
    "factory": (FactoryTask, factory_callbacks),
    "power": (PowerTask, power_callbacks),
    "portfolio": (PortfolioTask, portfolio_callbacks),
    "inventory": (InventoryTask, inventory_callbacks),
}


# ---------------------------------------------------------------- generators

@dataclass(frozen=True)
class MixtureOfGaussians:
    """Scalar Gaussian mixture, drawn independently per coordinate."""

    weights: tuple
    means: tuple
    stds: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(np.asarray(self.stds) <= 0):
            raise ValueError("component stds must be positive")
        if not len(self.weights) == len(self.means) == len(self.stds):
            raise ValueError("weights, means and stds must have equal length")

    @property
    def mean(self):
        return float(np.dot(self.weights, self.means))

    @property
    def var(self):
        w, m, s = (np.asarray(a, dtype=float) for a in (self.weights, self.means, self.stds))
        return float(np.dot(w, s * s + m * m) - self.mean ** 2)

    def logpdf(self, y):
        w, m, s = (np.asarray(a, dtype=float) for a in (self.weights, self.means, self.stds))
        y = np.asarray(y, dtype=float)[..., None]
        comp = np.log(w) - 0.5 * ((y - m) / s) ** 2 - np.log(s) - 0.5 * math.log(2 * math.pi)
        top = comp.max(axis=-1, keepdims=True)
        return (top + np.log(np.exp(comp - top).sum(axis=-1, keepdims=True)))[..., 0]


def factory_mixture(p=0.8, a=1.0, b=3.0, sigma=0.15):
    return MixtureOfGaussians((p, 1.0 - p), (a, -b), (sigma, sigma))


INVENTORY_MIXTURES = {
    3: ((-4.0, 0.0, 4.0), (0.15, 0.25, 0.15)),
    5: ((-6.0, -3.0, 0.0, 3.0, 6.0), (0.15, 0.25, 0.35, 0.25, 0.15)),
    10: ((-8.0, -6.0, -4.0, -2.0, -1.0, 0.0, 1.2, 2.8, 4.5, 7.5),
         (0.30, 0.75, 0.25, 0.40, 0.22, 0.20, 0.22, 0.35, 0.70, 1.25)),
}


def inventory_mixture(K=3, weights=None):
    means, stds = INVENTORY_MIXTURES[K]
    w = tuple(np.full(K, 1.0 / K)) if weights is None else tuple(weights)
    return MixtureOfGaussians(w, means, stds)


def sample_mixture(gen: MixtureOfGaussians, seed, count, dim=1):
    """``(count, dim)`` draws; ``seed`` is an int or a ``numpy`` Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comp = rng.choice(len(gen.weights), size=(count, dim), p=np.asarray(gen.weights))
    means = np.asarray(gen.means, dtype=float)[comp]
    stds = np.asarray(gen.stds, dtype=float)[comp]
    return means + stds * rng.standard_normal((count, dim))


@dataclass
class ConditionalGenerator:
    """``x ~ N(0, I)``, ``y = offset + W x + noise`` with mixture noise per coordinate."""

    W: np.ndarray
    noise: MixtureOfGaussians
    offset: np.ndarray = None
    noise_scale: float = 1.0
    clip: tuple = None

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        if self.offset is None:
            self.offset = np.zeros(self.W.shape[0])

    @property
    def x_dim(self):
        return self.W.shape[1]

    @property
    def y_dim(self):
        return self.W.shape[0]

    def sample_x(self, rng, count):
        return rng.standard_normal((count, self.x_dim))

    def sample_y(self, rng, x, count):
        """``count`` labels for one context ``x``."""
        noise = sample_mixture(self.noise, rng, count, self.y_dim) * self.noise_scale
        y = self.offset + self.W @ np.asarray(x, dtype=float) + noise
        if self.clip is not None:
            y = np.clip(y, *self.clip)
        return y

    def sample(self, rng, count):
        X = self.sample_x(rng, count)
        Y = np.stack([self.sample_y(rng, x, 1)[0] for x in X]) if count else np.zeros((0, self.y_dim))
        return X, Y


def factory_expected_cost(gen: MixtureOfGaussians, z):
    """Exact ``E[exp(-y.z)]`` when every ``y_i`` is an independent draw of ``gen``."""
    w, m, s = (np.asarray(a, dtype=float) for a in (gen.weights, gen.means, gen.stds))
    z = np.asarray(z, dtype=float)[..., None]
    per_coord = np.sum(w * np.exp(-m * z + 0.5 * s * s * z * z), axis=-1)
    return np.prod(per_coord, axis=-1)


@dataclass
class ConditionalMixture:
    """Mixture labels whose component weights depend on the context.

    ``x ~ N(0, I)``; component ``j`` is chosen with probability
    ``softmax(V x)_j`` and ``y = offset + mu_j + std_j * xi``, the same
    component for every label coordinate.
    """

    V: np.ndarray
    means: tuple
    stds: tuple
    offset: float = 0.0
    y_dim_: int = 1

    def __post_init__(self):
        self.V = np.atleast_2d(np.asarray(self.V, dtype=float))
        if self.V.shape[0] != len(self.means) or len(self.means) != len(self.stds):
            raise ValueError("V rows, means and stds must match the component count")

    @property
    def x_dim(self):
        return self.V.shape[1]

    @property
    def y_dim(self):
        return self.y_dim_

    def weights(self, x):
        a = self.V @ np.asarray(x, dtype=float)
        a = np.exp(a - a.max())
        return a / a.sum()

    def sample_x(self, rng, count):
        return rng.standard_normal((count, self.x_dim))

    def sample_y(self, rng, x, count):
        comp = rng.choice(len(self.means), size=count, p=self.weights(x))
        mu = self.offset + np.asarray(self.means, dtype=float)[comp]
        sd = np.asarray(self.stds, dtype=float)[comp]
        return mu[:, None] + sd[:, None] * rng.standard_normal((count, self.y_dim))

    def sample(self, rng, count):
        X = self.sample_x(rng, count)
        Y = np.stack([self.sample_y(rng, x, 1)[0] for x in X]) if count else np.zeros((0, self.y_dim))
        return X, Y


# ---------------------------------------------------------------- CSV data

class DataError(ValueError):
    pass


@dataclass
class DatasetCSV:
    X: np.ndarray
    Y: np.ndarray
    path: str = field(default="")

    @property
    def d_x(self):
        return self.X.shape[1]

    @property
    def d_y(self):
        return self.Y.shape[1]

    def __len__(self):
        return self.X.shape[0]


def load_csv(path) -> DatasetCSV:
    """Read a ``d_x,d_y`` header followed by rows of ``d_x + d_y`` reals."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        try:
            d_x, d_y = (int(v) for v in header)
        except ValueError:
            raise DataError(f"{path}:1: header must be 'd_x,d_y', got {header!r}") from None
        if d_x < 0 or d_y < 1:
            raise DataError(f"{path}:1: bad dims d_x={d_x}, d_y={d_y}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d_x + d_y:
                raise DataError(f"{path}:{lineno}: expected {d_x + d_y} values, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparsable value in {row!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    arr = np.array(rows, dtype=float).reshape(len(rows), d_x + d_y)
    return DatasetCSV(arr[:, :d_x], arr[:, d_x:], str(path))


def write_csv(path, X, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    X = X.reshape(Y.shape[0], -1) if X.size or X.ndim == 1 else np.zeros((Y.shape[0], 0))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"{X.shape[1]},{Y.shape[1]}\n")
        for x, y in zip(X, Y):
            fh.write(",".join(format(v, ".17g") for v in np.concatenate([x, y])) + "\n")
