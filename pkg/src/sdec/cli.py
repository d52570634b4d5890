"""Command line: ``sdec solve | train | check | bench``.

Exit codes: 0 success, 1 invalid input (bad arguments, bad config, unknown
subcommand, failed property check), 2 runtime failure during a run.
Results go to standard output as JSON; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import bellman
from .checks import SELECTORS, run_checks
from .config import load_config
from .errors import SdecError, UnknownSubcommand, ValidationError
from .mdp import is_tabular, make_benchmark_env
from .metrics import write_metrics
from .train import Z_50, env_from_config, evaluate_policy, sdec_train

COMMANDS = ("solve", "train", "check", "bench")


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so exit codes stay ours."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


class UsageError(ValidationError):
    pass


def _parse_param(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise UsageError(f"--param expects key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser():
    p = _Parser(prog="sdec", description="Smoothed Bellman primal-dual control toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{solve,train,check,bench}")

    s = sub.add_parser("solve", help="exact tabular fixed point of the smoothed Bellman operator")
    s.add_argument("--env", required=True)
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--gamma", type=float)
    s.add_argument("--param", action="append", default=[], type=_parse_param, metavar="KEY=VALUE",
                   help="environment parameter, repeatable")

    t = sub.add_parser("train", help="run the replay training loop from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)

    c = sub.add_parser("check", help="run the property-check suites")
    c.add_argument("suite", nargs="?", default="all", choices=SELECTORS)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, help="number of random MDPs per suite")
    c.add_argument("--fault-injection", action="store_true",
                   help="corrupt the analytic gradients; the gradient suite must fail")
    c.add_argument("--out", help="also write the JSON report here")

    b = sub.add_parser("bench", help="train over several seeds and report mean +- 50%% half-width")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--seed", type=int, help="first seed (default: the config seed)")
    b.add_argument("--svg", action="store_true", help="write curves.svg with per-iteration curves")
    return p


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_default)
    if path is None:
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _finite(x):
    return float(x) if math.isfinite(x) else None


# subcommands ----------------------------------------------------------------

def cmd_solve(args):
    params = dict(args.param)
    if args.gamma is not None:
        params["gamma"] = args.gamma
    mdp = make_benchmark_env(args.env, params)
    if not is_tabular(mdp):
        raise UsageError(f"solve needs a tabular environment; {args.env} is continuous")
    fp = bellman.solve_fixed_point(mdp, args.lam, tol=args.tol)
    out = {
        "env": args.env,
        "params": params,
        "gamma": mdp.gamma,
        "lambda": args.lam,
        "iterations": fp.iterations,
        "residual": fp.residual,
        "values": fp.values,
        "greedy_policy": bellman.greedy_policy(mdp, fp.values),
    }
    if args.lam > 0:
        pi = bellman.smoothed_optimal_policy(mdp, fp.values, args.lam)
        out["policy"] = pi
        out["bias_bound"] = bellman.smoothing_bias_bound(mdp.gamma, args.lam, math.log(mdp.n_actions))
    _dump(out)
    return 0


def _config(args):
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def train_once(cfg, out_dir):
    """Train, write metrics.csv / checkpoint.json / result.json into ``out_dir``; return the summary."""
    os.makedirs(out_dir, exist_ok=True)
    env = env_from_config(cfg)
    result = sdec_train(env, cfg)
    write_metrics(result.metrics, os.path.join(out_dir, "metrics.csv"))
    horizon = cfg.horizon or getattr(env, "horizon", 50)
    mean, half = evaluate_policy(env, result.pi, cfg.eval_episodes, horizon,
                                 np.random.default_rng([cfg.seed, 1]))
    checkpoint = {
        "config": cfg.to_dict(),
        "env": env.to_dict(),
        "V": result.V.to_dict(),
        "pi": result.pi.to_dict(),
        "rho": result.rho.to_dict(),
    }
    _dump(checkpoint, os.path.join(out_dir, "checkpoint.json"))
    summary = {
        "seed": cfg.seed,
        "episodes": result.episodes,
        "iterations": result.iterations,
        "wall_seconds": result.wall_seconds,
        "final_return": mean,
        "final_return_half_width_50": half,
        "oracle_gap_history": result.oracle_gap,
        "diagnostics": {k: (_finite(v) if isinstance(v, float) else v)
                        for k, v in result.diagnostics.items()},
    }
    _dump(summary, os.path.join(out_dir, "result.json"))
    return summary, result


def cmd_train(args):
    cfg = _config(args)
    summary, _ = train_once(cfg, args.out)
    _dump(summary)
    return 0


def cmd_check(args):
    report = run_checks(args.suite, seed=args.seed, seeds=args.seeds, fault_injection=args.fault_injection)
    d = report.to_dict()
    if args.out:
        _dump(d, args.out)
    _dump(d)
    for r in report.results:
        if not r.passed:
            print(f"FAIL {r.suite}: {r.name} (value {r.value!r}, tolerance {r.tolerance!r})", file=sys.stderr)
    return 0 if report.passed else 1


def _mean_half_width(xs):
    xs = np.asarray(xs, dtype=float)
    if xs.size < 2:
        return float(xs.mean()), 0.0
    return float(xs.mean()), float(Z_50 * xs.std(ddof=1) / math.sqrt(xs.size))


def cmd_bench(args):
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    cfg = _config(argparse.Namespace(config=args.config, seed=None))
    first = cfg.seed if args.seed is None else args.seed
    runs, curves = [], []
    for k in range(args.seeds):
        cfg.seed = first + k
        summary, result = train_once(cfg, os.path.join(args.out, f"seed_{cfg.seed}"))
        runs.append(summary)
        curves.append(result.metrics)
    returns = [r["final_return"] for r in runs]
    mean, half = _mean_half_width(returns)
    out = {
        "env": cfg.env.name,
        "seeds": [r["seed"] for r in runs],
        "final_return": {"mean": mean, "half_width_50": half, "per_seed": returns},
    }
    gaps = [r["diagnostics"].get("oracle_gap") for r in runs]
    if all(g is not None for g in gaps):
        gmean, ghalf = _mean_half_width(gaps)
        out["oracle_gap"] = {"mean": gmean, "half_width_50": ghalf, "per_seed": gaps}
    if args.svg:
        out["svg"] = write_curves_svg(curves, os.path.join(args.out, "curves.svg"))
    _dump(out, os.path.join(args.out, "bench.json"))
    _dump(out)
    return 0


def write_curves_svg(curves, path):
    """Mean objective (and evaluated return, when recorded) across seeds with 50% bands."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    n = min(len(c) for c in curves)
    it = np.array([curves[0][i].iteration for i in range(n)])
    panels = [("objective_L_eta", "L_eta (batch)")]
    if any(math.isfinite(r.avg_return) for c in curves for r in c):
        panels.append(("avg_return", "evaluated return"))
    fig, axes = plt.subplots(len(panels), 1, figsize=(7, 3 * len(panels)), squeeze=False)
    for ax, (field, label) in zip(axes[:, 0], panels):
        ys = np.array([[getattr(c[i], field) for i in range(n)] for c in curves])
        keep = np.all(np.isfinite(ys), axis=0)
        if not keep.any():
            continue
        m = ys[:, keep].mean(axis=0)
        h = Z_50 * ys[:, keep].std(axis=0, ddof=1) / math.sqrt(len(curves)) if len(curves) > 1 else 0 * m
        ax.plot(it[keep], m, lw=1.2)
        ax.fill_between(it[keep], m - h, m + h, alpha=0.3)
        ax.set_ylabel(label)
    axes[-1, 0].set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


HANDLERS = {"solve": cmd_solve, "train": cmd_train, "check": cmd_check, "bench": cmd_bench}


def run_command(argv):
    """Run one subcommand and return its exit code."""
    argv = list(argv)
    parser = build_parser()
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
            raise UnknownSubcommand(f"unknown subcommand {argv[0]!r}\n{parser.format_usage()}")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand\n{parser.format_usage()}")
        return HANDLERS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SdecError as exc:
        where = getattr(exc, "iteration", None)
        suffix = f" (iteration {where})" if where is not None and "iteration" not in str(exc) else ""
        print(f"runtime error: {type(exc).__name__}: {exc}{suffix}", file=sys.stderr)
        return 2


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
