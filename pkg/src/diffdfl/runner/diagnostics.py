"""Finite-difference suites and estimator-comparison diagnostics.

These back the ``gradcheck`` and ``compare-estimators`` commands.  Every
end-to-end check freezes all randomness (noises, labels, context) so the
objective is a deterministic function of the flat parameter vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffusion, estimators, tasks
from ..decision import solve_saa
from ..nn import DenseNet, ParamVector
from ..validation import (LinearDiffusionOracle, cosine, fd_grad, linear_gaussian_score,
                          rel_error)

E2E_TOL = 1e-4
DERIV_TOL = 1e-6
SOLVER_TOL = 1e-10
E2E_STEP = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    measure: str = "rel err"

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.measure} {self.error:.3e} (tol {self.tol:g})"


# ---------------------------------------------------------------- end-to-end

@dataclass
class _Instance:
    """Frozen decision problem: labels, context and a sampler of scenarios."""

    params: ParamVector
    draw: object          # theta-independent closure: () -> samples
    analytic: object      # (sol, samples, dF_dz) -> gradient
    cost: object
    cons: object
    y_true: np.ndarray

    def objective(self, theta):
        self.params.set_values(theta)
        Y = self.draw()
        sol = solve_saa(Y, self.cost, self.cons, tol=SOLVER_TOL)
        return float(self.cost.value(self.y_true, sol.z_star)[0])

    def gradients(self, step=E2E_STEP):
        """``(analytic, finite-difference)`` gradients at the current parameters."""
        theta = self.params.copy_values()
        fd = fd_grad(self.objective, theta, step)
        self.params.set_values(theta)
        Y = self.draw()
        sol = solve_saa(Y, self.cost, self.cons, tol=SOLVER_TOL)
        dF_dz = self.cost.grad_z(self.y_true, sol.z_star)[0]
        return self.analytic(sol, Y, dF_dz), fd

    def compare(self, name, step=E2E_STEP):
        g, fd = self.gradients(step)
        return CheckResult(name, rel_error(g, fd), E2E_TOL)


def _interior(sol, cons, margin):
    return bool(np.all(cons.h - cons.G @ sol.z_star > margin))


def _search(build, cons, rng, margin=0.05, tries=200):
    """First frozen instance whose decision sits strictly inside the box.

    At an active bound the decision is locally constant and every gradient
    vanishes, which would make the comparison vacuous.
    """
    for _ in range(tries):
        inst = build(rng)
        sol = solve_saa(inst.draw(), inst.cost, inst.cons, tol=SOLVER_TOL)
        if _interior(sol, cons, margin):
            return inst
    raise RuntimeError("no interior instance found; widen the search")


def _factory(d=2):
    task = tasks.FactoryTask(d, 2.0)
    return tasks.factory_callbacks(task)


def diffusion_instance(rng, T, d=2, x_dim=2, M=8, cost=None, cons=None):
    if cost is None:
        cost, cons = _factory(d)
    sched = diffusion.build_schedule(T)

    def build(r):
        params = ParamVector()
        model = diffusion.EpsilonModel(d, x_dim, (6,), 4, 4, "silu", params, r)
        x = r.standard_normal(x_dim)
        noises = r.standard_normal((T + 1, M, d))
        y_true = r.standard_normal(d)

        def draw():
            return diffusion.reverse_sample(model, x, noises, sched).y0

        def analytic(sol, Y, dF_dz):
            traj = diffusion.reverse_sample(model, x, noises, sched)
            return estimators.diff_reparam_grad(model, x, traj, sol, cost, cons, dF_dz,
                                                sched).grad

        return _Instance(params, draw, analytic, cost, cons, y_true)

    return _search(build, cons, rng)


def gaussian_instance(rng, d=2, x_dim=2, M=8, cost=None, cons=None):
    if cost is None:
        cost, cons = _factory(d)

    def build(r):
        params = ParamVector()
        pred = estimators.GaussianPredictor(x_dim, d, (6,), "silu", params, r)
        x = r.standard_normal(x_dim)
        eps = r.standard_normal((M, d))
        y_true = r.standard_normal(d)

        def analytic(sol, Y, dF_dz):
            return estimators.gauss_reparam_grad(pred, x, eps, sol, cost, cons, dF_dz).grad

        return _Instance(params, lambda: pred.sample(x, eps), analytic, cost, cons, y_true)

    return _search(build, cons, rng)


def deterministic_instance(rng, cost, cons, d, x_dim=2, bias=0.0, require_interior=True):
    def build(r):
        params = ParamVector()
        net = DenseNet([x_dim, 6, d], params, "silu", "det", r)
        params.view("det.b1")[:] += bias
        x = r.standard_normal(x_dim)
        y_true = r.standard_normal(d)

        def analytic(sol, Y, dF_dz):
            return estimators.deterministic_grad(net, x, sol, cost, cons, dF_dz).grad

        return _Instance(params, lambda: np.atleast_2d(net.forward(x)), analytic, cost, cons,
                         y_true)

    if require_interior:
        return _search(build, cons, rng)
    return build(rng)


def end_to_end_checks(seed=0):
    """Analytic ``dF/dtheta`` against central differences for every estimator.

    Factory instances for the diffusion chain (T = 1 and 3), the Gaussian
    head and the point predictor.  A single-scenario factory decision always
    sits on a bound (its gradient is exactly zero), so the point predictor is
    also checked on a two-asset portfolio, where its decision is interior.
    """
    rng = np.random.default_rng((seed, 11))
    out = []
    for T in (1, 3):
        out.append(diffusion_instance(rng, T).compare(f"factory diff-rp T={T}"))
    out.append(gaussian_instance(rng).compare("factory gauss-rp"))
    # both sides vanish up to the solver tolerance, so compare absolute sizes
    cost, cons = _factory(2)
    g, fd = deterministic_instance(rng, cost, cons, 2, require_interior=False).gradients()
    out.append(CheckResult("factory deterministic (decision on a bound)",
                           float(max(np.max(np.abs(g)), np.max(np.abs(fd)))), 1e-8, "max |grad|"))
    # a portfolio decision is interior when 1/alpha lies between the predicted returns
    cost, cons = tasks.portfolio_callbacks(tasks.PortfolioTask(2, 1.0))
    inst = deterministic_instance(rng, cost, cons, 2, bias=np.array([0.0, 2.0]))
    out.append(inst.compare("portfolio deterministic"))
    return out


# ---------------------------------------------------------------- task derivatives

def _task_cases():
    yield "factory", tasks.factory_callbacks(tasks.FactoryTask(3, 2.0)), 3, 3, 1.0
    yield "power", tasks.power_callbacks(tasks.PowerTask(6)), 6, 6, 2.0
    yield "portfolio", tasks.portfolio_callbacks(tasks.PortfolioTask(4, 1.5)), 4, 4, 1.0
    yield ("inventory", tasks.inventory_callbacks(tasks.InventoryTask(0.5, 0.1, 4.0, 0.5, 1.0,
                                                                      0.1, 12.0)), 1, 1, 3.0)


def _jac(fn, v, step):
    cols = []
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = step
        cols.append((fn(v + e) - fn(v - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def task_derivative_checks(seed=0, points=100, step=1e-6, kink_gap=1e-3):
    """Callback derivatives against central differences at random smooth points."""
    rng = np.random.default_rng((seed, 12))
    out = []
    for name, (cost, _), d, dy, spread in _task_cases():
        worst = [0.0, 0.0, 0.0]
        done = 0
        while done < points:
            y = spread * rng.standard_normal(dy)
            z = spread * rng.standard_normal(d)
            if name == "factory":
                z = np.abs(z)
            if name in ("power", "inventory") and np.min(np.abs(z - y[:d])) < kink_gap:
                continue
            Y = y[None, :]
            g = cost.grad_z(Y, z)[0]
            g_fd = _jac(lambda v: cost.value(Y, v), z, step)[0]
            h_fd = _jac(lambda v: cost.grad_z(Y, v)[0], z, step)
            hy_fd = _jac(lambda v: cost.grad_z(v[None, :], z)[0], y, step)
            errs = (rel_error(g, g_fd), rel_error(cost.hess_zz(Y, z)[0], h_fd),
                    rel_error(cost.hess_zy(Y, z)[0], hy_fd))
            worst = [max(a, b) for a, b in zip(worst, errs)]
            done += 1
        for label, err in zip(("grad_z", "hess_zz", "hess_zy"), worst):
            out.append(CheckResult(f"{name} {label}", err, DERIV_TOL))
    return out


def linear_score_checks(seed=0, dims=(1, 2, 3)):
    """Closed-form linear-model score against differences of its log density."""
    rng = np.random.default_rng((seed, 13))
    out = []
    for d in dims:
        sched = diffusion.build_schedule(4)
        model = diffusion.LinearEpsilonModel(d, 2, sched.T, rng=rng, scale=0.3)
        oracle = LinearDiffusionOracle.from_model(model, sched)
        x = rng.standard_normal(2)
        y0 = rng.standard_normal(d)
        exact = linear_gaussian_score(oracle, x, y0)
        fd = fd_grad(lambda th: oracle.with_flat(th).log_density(x, y0), oracle.flat(), 1e-5)
        out.append(CheckResult(f"linear-Gaussian score d={d}", rel_error(exact, fd), DERIV_TOL))
    return out


def gradcheck(seed=0):
    """All finite-difference suites; returns a flat list of :class:`CheckResult`."""
    return end_to_end_checks(seed) + task_derivative_checks(seed) + linear_score_checks(seed)


# ---------------------------------------------------------------- estimator comparison

@dataclass
class ComparisonRow:
    dim: int
    cosine: float
    reparam_norm: float
    score_norm: float
    score_var: float
    reparam_var: float


def _trace_cov(G):
    return float(G.var(axis=0, ddof=1).sum()) if G.shape[0] > 1 else float("nan")


def _fitted_diffusion(d, seed, epochs, T, hidden, beta):
    from .config import ExperimentConfig
    from .train import train

    cfg = ExperimentConfig(task="factory", method="diff-ts", dim=d, T=T, hidden=hidden,
                           beta_min=beta[0], beta_max=beta[1], epochs=epochs, n_train=512,
                           n_test=1, seed=seed, eval_M=10, oracle_draws=10)
    res = train(cfg, evaluate_every=10 ** 9)
    return res.model, res.problem


def compare_diffusion_estimators(dims=(1, 2, 4, 8), M=1000, repeats=8, k=8, epochs=10,
                                 T=50, hidden=(64, 64), labels=4000, seed=0, beta=(2e-3, 0.4)):
    """Cosine between the pathwise and score-function diffusion gradients.

    Per dimension a diffusion model is fit to factory data (two-stage), then
    both estimators target the gradient of the true expected cost at the SAA
    decision: ``dF/dz`` averages the cost gradient over ``labels`` fresh
    draws.  Estimates from ``repeats`` independent batches of ``M``
    scenarios are averaged before comparison; their spread is reported as
    a variance trace.
    """
    rows = []
    for d in dims:
        wrapped, problem = _fitted_diffusion(d, seed, epochs, T, hidden, beta)
        rng = np.random.default_rng((seed, 21, d))
        model, sched, scale = wrapped.model, wrapped.sched, wrapped.scale
        cost, cons = wrapped.model_cost, problem.cons
        sampler = diffusion.TimestepSampler(T, adaptive=False)
        x = np.zeros(0)
        Y_true = problem.generator.sample_y(rng, x, labels)
        rp, sf = [], []
        for _ in range(repeats):
            traj = diffusion.sample(model, x, M, rng, sched)
            sol = solve_saa(scale.from_model(traj.y0), problem.cost, cons)
            dF_dz = problem.cost.mean_grad(Y_true, sol.z_star)
            rp.append(estimators.diff_reparam_grad(model, x, traj, sol, cost, cons, dF_dz,
                                                   sched).grad)
            sf.append(estimators.diff_score_grad(model, x, traj.y0, sol, cost, cons, dF_dz,
                                                 sampler, k, rng, sched).grad)
        rp, sf = np.array(rp), np.array(sf)
        g_rp, g_sf = rp.mean(axis=0), sf.mean(axis=0)
        rows.append(ComparisonRow(d, cosine(g_rp, g_sf), float(np.linalg.norm(g_rp)),
                                  float(np.linalg.norm(g_sf)), _trace_cov(sf), _trace_cov(rp)))
    return rows


def compare_gaussian_estimators(d=2, samples=100_000, labels=4000, seed=0, mean=0.5):
    """Cosine between Gaussian pathwise and score-function gradients.

    The head starts at ``N(mean, 1)`` per coordinate, which puts the
    factory decision inside the box (``z* = mean / var``).
    """
    rng = np.random.default_rng((seed, 22, d))
    cost, cons = _factory(d)
    params = ParamVector()
    pred = estimators.GaussianPredictor(2, d, (16,), "silu", params, rng)
    params.view("gauss.b1")[:d] += mean
    x = rng.standard_normal(2)
    eps = rng.standard_normal((samples, d))
    Y = pred.sample(x, eps)
    sol = solve_saa(Y, cost, cons)
    Y_true = tasks.sample_mixture(tasks.factory_mixture(), rng, labels, d)
    dF_dz = cost.mean_grad(Y_true, sol.z_star)
    g_rp = estimators.gauss_reparam_grad(pred, x, eps, sol, cost, cons, dF_dz).grad
    g_sf = estimators.gauss_score_grad(pred, x, Y, sol, cost, cons, dF_dz).grad
    return cosine(g_rp, g_sf), sol.z_star


def factory_decision_cost(model, problem, cfg, reps=300, seed=99):
    """Exact expected factory cost of the model's decision, averaged over draws.

    Each repetition draws ``cfg.eval_M`` scenarios, solves the SAA problem
    with them and scores the decision in closed form against the true
    mixture.  Returns ``(mean, standard error)``.
    """
    from .train import _solve

    rng = np.random.default_rng((seed, 404))
    gen = problem.generator.gen
    x = np.zeros(cfg.x_dim)
    vals = np.empty(reps)
    for i in range(reps):
        Y = model.scale.from_model(model.draw(x, cfg.eval_M, rng)[0])
        vals[i] = tasks.factory_expected_cost(gen, _solve(Y, problem, cfg, "evaluation").z_star)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(reps))
