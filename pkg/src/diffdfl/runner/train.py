"""Training loops, evaluation metrics and paired comparisons."""
from __future__ import annotations

import csv
import time
from dataclasses import astuple, dataclass, field, fields

import numpy as np

from ..decision import DegenerateKKTError, InfeasibleError, NonConvergenceError, solve_saa
from ..tasks import load_csv
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .models import Standardizer, build_model
from .problem import Problem, make_problem


class TrainingError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    epoch: int
    train_task_loss: float
    test_task_loss: float
    test_rmse: float
    regret: float
    wall_time: float


METRIC_FIELDS = [f.name for f in fields(MetricsRow)]


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(METRIC_FIELDS) + "\n")
        for r in rows:
            vals = astuple(r)
            fh.write(str(vals[0]) + "," + ",".join(format(v, ".17g") for v in vals[1:]) + "\n")


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRow(int(r["epoch"]), *(float(r[k]) for k in METRIC_FIELDS[1:]))
                for r in reader]


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values, grad):
        """In-place descent step on ``values``."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray

    def __len__(self):
        return self.Y.shape[0]


def load_data(cfg: ExperimentConfig, problem: Problem):
    """``(train, test)`` from CSV files when configured, else from the generator."""
    if cfg.train_csv:
        train = load_csv(cfg.train_csv)
        test = load_csv(cfg.test_csv) if cfg.test_csv else train
        for ds in (train, test):
            if ds.d_x != problem.x_dim or ds.d_y != problem.y_dim:
                raise ValueError(f"{ds.path}: dims ({ds.d_x}, {ds.d_y}) do not match the task "
                                 f"({problem.x_dim}, {problem.y_dim})")
        return Dataset(train.X, train.Y), Dataset(test.X, test.Y)
    rng = np.random.default_rng((cfg.seed, 101))
    X, Y = problem.generator.sample(rng, cfg.n_train + cfg.n_test)
    return (Dataset(X[:cfg.n_train], Y[:cfg.n_train]), Dataset(X[cfg.n_train:], Y[cfg.n_train:]))


def _solve(Y, problem, cfg, where):
    try:
        return solve_saa(Y, problem.cost, problem.cons, tol=cfg.tol)
    except (NonConvergenceError, DegenerateKKTError, InfeasibleError) as exc:
        raise TrainingError(f"{where}: decision solve failed: {exc}") from exc


class OracleCache:
    """Decisions of the true distribution (or hindsight, without a generator)."""

    def __init__(self, problem: Problem, cfg: ExperimentConfig, use_generator=True):
        self.problem, self.cfg = problem, cfg
        self.use_generator = use_generator and problem.generator is not None
        self._cache = {}

    def decision(self, x, y):
        cfg = self.cfg
        if not self.use_generator:
            return _solve(np.atleast_2d(y), self.problem, cfg, "hindsight oracle").z_star
        key = np.asarray(x, dtype=float).tobytes()
        if key not in self._cache:
            rng = np.random.default_rng((cfg.seed, 202, len(self._cache)))
            draws = self.problem.generator.sample_y(rng, x, cfg.oracle_draws)
            self._cache[key] = _solve(draws, self.problem, cfg, "oracle").z_star
        return self._cache[key]


@dataclass
class EvalResult:
    costs: np.ndarray
    oracle_costs: np.ndarray
    rmse: float
    decisions: np.ndarray

    @property
    def task_loss(self):
        return float(self.costs.mean())

    @property
    def regret(self):
        return float(np.mean(self.costs - self.oracle_costs))


def evaluate_model(model, problem: Problem, cfg: ExperimentConfig, data: Dataset, rng,
                   oracle: OracleCache = None) -> EvalResult:
    """Per-instance decision cost ``f(y*, z*)``, RMSE of the predictive mean and regret."""
    n = len(data)
    costs = np.empty(n)
    oracle_costs = np.empty(n)
    decisions = np.empty((n, problem.cons.d))
    sq_err = 0.0
    for i in range(n):
        x, y = data.X[i], data.Y[i]
        Y = model.scale.from_model(model.draw(x, cfg.eval_M, rng)[0])
        sol = _solve(Y, problem, cfg, f"evaluation instance {i}")
        decisions[i] = sol.z_star
        costs[i] = problem.cost.value(y, sol.z_star)[0]
        sq_err += float(np.sum((model.predict_mean(Y) - y) ** 2))
        if oracle is not None:
            oracle_costs[i] = problem.cost.value(y, oracle.decision(x, y))[0]
        else:
            oracle_costs[i] = np.nan
    rmse = float(np.sqrt(sq_err / (n * problem.y_dim))) if n else float("nan")
    return EvalResult(costs, oracle_costs, rmse, decisions)


def win_rate(costs_a, costs_b):
    """Paired comparison: instances where ``a`` is strictly cheaper, ties, losses."""
    a, b = np.asarray(costs_a, dtype=float), np.asarray(costs_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("win-rate needs paired instances")
    wins = int(np.sum(a < b))
    ties = int(np.sum(a == b))
    losses = int(np.sum(a > b))
    return {"wins": wins, "ties": ties, "losses": losses,
            "rate": wins / a.size if a.size else float("nan")}


def _dfl_step(model, problem, cfg, X, Y, rng, where):
    """Mean batch decision loss and its gradient.

    Samples are drawn in the model's standardized label space; the decision
    is solved on real labels and the estimators see the wrapped cost.
    """
    B = Y.shape[0]
    scale, wcost = model.scale, model.model_cost
    keep = model.family == "diff" and cfg.estimator == "rp"
    grad = np.zeros(len(model.params))
    loss = 0.0
    if problem.x_dim == 0:
        # no context: one shared decision for the whole batch
        x = X[0]
        S, path = model.draw(x, cfg.M, rng, keep)
        sol = _solve(scale.from_model(S), problem, cfg, where)
        loss = float(problem.cost.value(Y, sol.z_star).mean())
        dF_dz = problem.cost.grad_z(Y, sol.z_star).mean(axis=0)
        grad += model.dfl_grad(x, S, path, sol, wcost, problem.cons, dF_dz, rng)
        return loss, grad
    for b in range(B):
        x = X[b]
        S, path = model.draw(x, cfg.M, rng, keep)
        sol = _solve(scale.from_model(S), problem, cfg, where)
        loss += float(problem.cost.value(Y[b], sol.z_star)[0]) / B
        dF_dz = problem.cost.grad_z(Y[b], sol.z_star)[0] / B
        grad += model.dfl_grad(x, S, path, sol, wcost, problem.cons, dF_dz, rng)
    return loss, grad


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    model: object
    problem: Problem
    train: Dataset
    test: Dataset
    history: list = field(default_factory=list)


def _eval_row(model, problem, cfg, train, test, oracle, epoch, start):
    # the same draws at every epoch, so metric changes reflect the parameters only
    rng = np.random.default_rng((cfg.seed, 303))
    n_sub = min(len(train), max(len(test), 1))
    sub = Dataset(train.X[:n_sub], train.Y[:n_sub])
    tr = evaluate_model(model, problem, cfg, sub, rng)
    te = evaluate_model(model, problem, cfg, test, rng, oracle)
    return MetricsRow(epoch, tr.task_loss, te.task_loss, te.rmse, te.regret,
                      time.perf_counter() - start), te


def _apply(opt, model, loss, grad, where):
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise TrainingError(f"{where}: non-finite loss {loss} or gradient "
                            f"(|g|max={np.nanmax(np.abs(grad)):.3g})")
    opt.step(model.params.values, grad)


def train(cfg: ExperimentConfig, data=None, log=None, evaluate_every=1) -> TrainResult:
    """Run the configured method; deterministic per ``cfg.seed``."""
    start = time.perf_counter()
    problem = make_problem(cfg)
    train_set, test_set = data if data is not None else load_data(cfg, problem)
    init_rng = np.random.default_rng((cfg.seed, 1))
    step_rng = np.random.default_rng((cfg.seed, 2))
    model = build_model(cfg, problem.x_dim, problem.y_dim, init_rng)
    _attach_scale(model, cfg, problem, train_set)
    oracle = OracleCache(problem, cfg, use_generator=not cfg.train_csv)
    n = len(train_set)

    def batches(epoch_rng):
        perm = epoch_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            yield train_set.X[idx], train_set.Y[idx]

    pre_opt = Adam(len(model.params), cfg.pretrain_lr)
    for ep in range(cfg.pretrain_epochs):
        for s, (Xb, Yb) in enumerate(batches(step_rng)):
            loss, grad = model.two_stage(Xb, model.scale.to_model(Yb), step_rng)
            _apply(pre_opt, model, loss, grad, f"pretrain epoch {ep + 1} step {s}")

    row, _ = _eval_row(model, problem, cfg, train_set, test_set, oracle, 0, start)
    metrics = [row]
    if log:
        log(row)
    opt = Adam(len(model.params), cfg.lr)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        for s, (Xb, Yb) in enumerate(batches(step_rng)):
            where = f"epoch {epoch} step {s}"
            if cfg.is_two_stage:
                loss, grad = model.two_stage(Xb, model.scale.to_model(Yb), step_rng)
            else:
                loss, grad = _dfl_step(model, problem, cfg, Xb, Yb, step_rng, where)
                if cfg.reg:
                    _, g_reg = model.two_stage(Xb, model.scale.to_model(Yb), step_rng)
                    grad = grad + cfg.reg * g_reg
            _apply(opt, model, loss, grad, where)
            history.append(loss)
        if epoch % evaluate_every == 0 or epoch == cfg.epochs:
            row, _ = _eval_row(model, problem, cfg, train_set, test_set, oracle, epoch, start)
            metrics.append(row)
            if log:
                log(row)
    return TrainResult(Checkpoint.from_params(model.params), metrics, model, problem,
                       train_set, test_set, history)


def _attach_scale(model, cfg, problem, train_set):
    if cfg.standardize and len(train_set):
        model.scale = Standardizer.fit(train_set.Y)
    else:
        model.scale = Standardizer.identity(problem.y_dim)
    model.model_cost = model.scale.wrap_cost(problem.cost)


def restore_model(cfg: ExperimentConfig, checkpoint: Checkpoint):
    """Rebuild the configured model with saved parameters.

    Also returns the configured data splits; the label standardizer is refit
    on the training split, which is deterministic per configuration.
    """
    problem = make_problem(cfg)
    model = build_model(cfg, problem.x_dim, problem.y_dim, np.random.default_rng(0))
    checkpoint.restore(model.params)
    train_set, test_set = load_data(cfg, problem)
    _attach_scale(model, cfg, problem, train_set)
    return model, problem, train_set, test_set


def evaluate(checkpoint: Checkpoint, cfg: ExperimentConfig, test: Dataset = None,
             epoch=0) -> tuple:
    """Metrics of a saved model on ``test`` (default: the configured test split).

    Returns ``(MetricsRow, EvalResult)`` for the test data.
    """
    start = time.perf_counter()
    model, problem, train_set, default_test = restore_model(cfg, checkpoint)
    test = default_test if test is None else test
    if test.X.shape[1] != problem.x_dim or test.Y.shape[1] != problem.y_dim:
        raise ValueError("test data dimensions do not match the task")
    oracle = OracleCache(problem, cfg, use_generator=not cfg.train_csv)
    row, res = _eval_row(model, problem, cfg, train_set, test, oracle, epoch, start)
    return row, res
