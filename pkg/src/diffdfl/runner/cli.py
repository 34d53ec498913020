"""Command line: ``diffdfl <command> [--config FILE] [--seed N] [--out-dir DIR]``.

Exit status is 0 on success, 1 when a run fails and 2 for usage errors
(unknown commands or flags, malformed configuration).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from ..tasks import write_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, config_dict, load_config, parse_config, \
    serialize_config
from .problem import make_problem
from .train import TrainingError, evaluate, load_data, train, win_rate, write_metrics

CHECKPOINT = "checkpoint.ddfl"


class UsageError(Exception):
    pass


def _common(parser):
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="diffdfl",
                                     description="Decision-focused learning experiments.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train one method and write metrics and a checkpoint")
    _common(p)
    p.add_argument("--quiet", action="store_true", help="do not print per-epoch metrics")

    p = sub.add_parser("eval", help="evaluate a checkpoint on test data")
    _common(p)
    p.add_argument("--checkpoint", help=f"checkpoint file (default: OUT_DIR/{CHECKPOINT})")
    p.add_argument("--test-csv", help="test data CSV (default: the configured test split)")
    p.add_argument("--baseline", help="second checkpoint for a paired win-rate")
    p.add_argument("--baseline-config", help="configuration of the baseline checkpoint")

    p = sub.add_parser("gradcheck", help="finite-difference gradient and derivative suites")
    _common(p)

    p = sub.add_parser("compare-estimators",
                       help="cosine and variance of score-function vs pathwise gradients")
    _common(p)
    p.add_argument("--dims", default="1,2,4,8", help="comma-separated decision dimensions")
    p.add_argument("--samples", type=int, default=1000, help="scenarios per batch")
    p.add_argument("--repeats", type=int, default=32, help="independent batches per dimension")
    p.add_argument("--epochs", type=int, default=10, help="two-stage fitting epochs")

    p = sub.add_parser("gen-data", help="write train/test CSV files from the task generator")
    _common(p)
    return parser


def _config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    text = ""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    text += "".join(f"{k}={v}\n" for k, v in overrides.items())
    cfg = parse_config(text)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, allow_nan=True)
        fh.write("\n")


def _row_dict(row):
    return {k: getattr(row, k) for k in ("epoch", "train_task_loss", "test_task_loss",
                                         "test_rmse", "regret", "wall_time")}


def cmd_train(args, out):
    cfg = _config(args)
    log = None if args.quiet else (lambda r: print(
        f"epoch {r.epoch:4d}  train {r.train_task_loss:.6g}  test {r.test_task_loss:.6g}  "
        f"rmse {r.test_rmse:.4g}  regret {r.regret:.4g}  {r.wall_time:.1f}s", flush=True))
    res = train(cfg, log=log)
    write_metrics(os.path.join(out, "metrics.csv"), res.metrics)
    save_checkpoint(os.path.join(out, CHECKPOINT), res.checkpoint)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    _write_json(os.path.join(out, "summary.json"),
                {"command": "train", "final": _row_dict(res.metrics[-1]),
                 "config": config_dict(cfg)})
    return 0


def cmd_eval(args, out):
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint or os.path.join(out, CHECKPOINT))
    test = None
    if args.test_csv:
        from ..tasks import load_csv
        from .train import Dataset
        ds = load_csv(args.test_csv)
        test = Dataset(ds.X, ds.Y)
    row, res = evaluate(ckpt, cfg, test)
    summary = {"command": "eval", "metrics": _row_dict(row), "config": config_dict(cfg)}
    if args.baseline:
        base_cfg = load_config(args.baseline_config) if args.baseline_config else cfg
        if args.seed is not None:
            base_cfg = base_cfg.replace(seed=args.seed)
        _, base = evaluate(load_checkpoint(args.baseline), base_cfg, test)
        summary["win_rate"] = win_rate(res.costs, base.costs)
        print(f"win-rate vs baseline: {summary['win_rate']['rate']:.4f} "
              f"({summary['win_rate']['wins']} wins, {summary['win_rate']['ties']} ties, "
              f"{summary['win_rate']['losses']} losses)")
    write_metrics(os.path.join(out, "eval_metrics.csv"), [row])
    np.savetxt(os.path.join(out, "eval_costs.csv"),
               np.column_stack([res.costs, res.oracle_costs]), delimiter=",",
               header="cost,oracle_cost", comments="", fmt="%.17g")
    _write_json(os.path.join(out, "summary.json"), summary)
    print(f"test task loss {row.test_task_loss:.6g}  rmse {row.test_rmse:.4g}  "
          f"regret {row.regret:.4g}")
    return 0


def cmd_gradcheck(args, out):
    from .diagnostics import gradcheck
    cfg = _config(args)
    results = gradcheck(cfg.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    _write_json(os.path.join(out, "gradcheck.json"),
                [{"name": r.name, "error": r.error, "tol": r.tol, "passed": r.passed}
                 for r in results])
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else 1


def cmd_compare(args, out):
    from .diagnostics import compare_diffusion_estimators, compare_gaussian_estimators
    cfg = _config(args)
    try:
        dims = tuple(int(v) for v in args.dims.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"--dims expects integers, got {args.dims!r}") from None
    if not dims or min(dims) < 1:
        raise UsageError("--dims needs positive dimensions")
    rows = compare_diffusion_estimators(dims, M=args.samples, repeats=args.repeats,
                                        epochs=args.epochs, T=cfg.T, hidden=cfg.hidden,
                                        seed=cfg.seed, beta=(cfg.beta_min, cfg.beta_max))
    header = "dim,cosine,reparam_norm,score_norm,reparam_var_trace,score_var_trace"
    lines = [header] + [f"{r.dim},{r.cosine:.17g},{r.reparam_norm:.17g},{r.score_norm:.17g},"
                        f"{r.reparam_var:.17g},{r.score_var:.17g}" for r in rows]
    with open(os.path.join(out, "compare_estimators.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    cos_g, _ = compare_gaussian_estimators(seed=cfg.seed)
    print(f"gaussian (d=2, 1e5 samples) cosine {cos_g:.6f}")
    return 0


def cmd_gen_data(args, out):
    cfg = _config(args)
    if cfg.train_csv:
        raise UsageError("gen-data writes from the generator; unset train_csv")
    train_set, test_set = load_data(cfg, make_problem(cfg))
    for name, ds in (("train.csv", train_set), ("test.csv", test_set)):
        path = os.path.join(out, name)
        write_csv(path, ds.X, ds.Y)
        print(f"wrote {len(ds)} rows to {path}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "compare-estimators": cmd_compare, "gen-data": cmd_gen_data}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)      # exits with status 2 on usage errors
    start = time.perf_counter()
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        code = COMMANDS[args.command](args, args.out_dir)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"diffdfl: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"diffdfl: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    print(f"[{args.command} finished in {time.perf_counter() - start:.1f}s]", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
