"""Command line interface: ``trsoc run | sweep | eval``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .benchmarks import PROBLEM_IDS, make_problem
from .driver import RunConfig, run
from .losses import LOSS_IDS
from .metrics import COLUMNS, MetricsWriter, evaluate_control
from .nn import load_checkpoint
from .sde import TimeGrid

OUT_ENV = "TRSOC_OUT"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("trsoc")

# flag -> RunConfig field
_OVERRIDES = {
    "problem": "problem", "loss": "loss", "eps": "epsilon", "delta": "delta", "dim": "dim",
    "seed": "seed", "buffer_size": "buffer_size", "inner_steps": "inner_steps", "batch": "batch",
    "steps": "steps", "max_outer": "max_outer", "net": "net", "lr": "lr",
    "eval_samples": "eval_samples", "integrator": "integrator",
}


class UsageError(Exception):
    pass


def _add_run_flags(p):
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--problem", help=f"one of {', '.join(PROBLEM_IDS)}")
    p.add_argument("--loss", help=f"one of {', '.join(LOSS_IDS)}")
    p.add_argument("--eps", type=float, help="trust-region size")
    p.add_argument("--delta", type=float, help="stop once lambda <= delta")
    p.add_argument("--dim", type=int)
    p.add_argument("--buffer-size", type=int, help="trajectories per outer iteration")
    p.add_argument("--inner-steps", type=int, help="gradient steps per outer iteration")
    p.add_argument("--batch", type=int, help="minibatch size")
    p.add_argument("--steps", type=int, help="time steps per trajectory")
    p.add_argument("--max-outer", type=int)
    p.add_argument("--net", help="network preset")
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-samples", type=int)
    p.add_argument("--integrator")
    p.add_argument("--no-trust-region", action="store_true", help="plain (untempered) updates")
    p.add_argument("--wall-time", action="store_true", help="record wall time in metrics.csv")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trsoc", description="Trust-region stochastic optimal control solver")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one control")
    _add_run_flags(p)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sweep", help="train over several seeds and aggregate")
    _add_run_flags(p)
    p.add_argument("--seeds", type=int, nargs="*", required=True)

    p = sub.add_parser("eval", help="evaluate a saved control")
    p.add_argument("checkpoint")
    p.add_argument("--problem", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", nargs="*", default=None, help="subset of ctrl_l2 dlogz tvd")
    p.add_argument("--out", help="write the row to this CSV file")
    return ap


def config_from_args(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else RunConfig()
    values = cfg.to_dict()
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "no_trust_region", False):
        values["trust_region"] = False
    if getattr(args, "wall_time", False):
        values["wall_time"] = True
    cfg = RunConfig.from_dict(values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from None
    return cfg


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs"))


def _write_summary(path: Path, summary: dict):
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")


def _run_one(cfg: RunConfig, out: Path) -> tuple[int, dict]:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    report = run(cfg, out)
    summary = report.summary()
    _write_summary(out / "summary.json", summary)
    log.info("%s: %s after %d iterations; final %s", out, report.termination, report.iterations, report.final)
    code = EXIT_RUNTIME if report.termination.startswith(("diverged", "simulation failed")) else EXIT_OK
    return code, summary


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out) if args.out else _out_root(args) / f"{cfg.problem}-{cfg.loss}-seed{cfg.seed}"
    code, summary = _run_one(cfg, out)
    print(json.dumps(dict(out=str(out), termination=summary["termination"], **summary["final"]), sort_keys=True))
    return code


def aggregate(summaries: list[dict]) -> dict:
    keys = sorted({k for s in summaries for k in s["final"]})
    agg = {}
    for k in keys:
        vals = np.array([s["final"][k] for s in summaries if k in s["final"]], dtype=np.float64)
        agg[k] = dict(mean=float(vals.mean()), sd=float(vals.std(ddof=1)) if vals.size > 1 else 0.0, n=int(vals.size))
    return agg


def cmd_sweep(args) -> int:
    if not args.seeds:
        raise cfgmod.ConfigError("sweep needs at least one seed")
    base = config_from_args(args)
    root = _out_root(args) / f"{base.problem}-{base.loss}-sweep"
    summaries, codes = [], []
    for s in args.seeds:
        values = base.to_dict()
        values["seed"] = s
        code, summary = _run_one(RunConfig.from_dict(values), root / f"seed{s}")
        summaries.append(summary)
        codes.append(code)
    result = dict(seeds=list(args.seeds), aggregate=aggregate(summaries),
                  terminations=[s["termination"] for s in summaries])
    _write_summary(root / "sweep.json", result)
    print(json.dumps(result["aggregate"], sort_keys=True))
    return max(codes)


def cmd_eval(args) -> int:
    if args.samples < 2:
        raise cfgmod.ConfigError("eval: --samples must be >= 2")
    if args.problem not in PROBLEM_IDS:
        raise cfgmod.ConfigError(f"eval: unknown problem {args.problem!r}; valid: {', '.join(PROBLEM_IDS)}")
    try:
        net, extra = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise cfgmod.ConfigError(f"eval: cannot load checkpoint: {exc}") from None
    problem = make_problem(args.problem, args.dim or net.dim, T=net.T)
    if problem.dim != net.dim:
        raise cfgmod.ConfigError(f"eval: checkpoint dim {net.dim} does not match problem dim {problem.dim}")
    integ = "exp_ou" if problem.ou_rate is not None else "euler"
    res = evaluate_control(problem, net, TimeGrid.uniform(net.T, args.steps), args.samples, (args.seed, 3, 0), integ)
    wanted = args.metrics
    if wanted is not None:
        bad = set(wanted) - {"ctrl_l2", "dlogz", "tvd"}
        if bad:
            raise cfgmod.ConfigError(f"eval: unknown metrics {sorted(bad)}")
        keep = set(wanted) | ({"ctrl_l2_se"} if "ctrl_l2" in wanted else set())
        res = {k: v for k, v in res.items() if k in keep}
    row = {k: v for k, v in res.items() if k in COLUMNS}
    row["outer_iter"] = extra.get("iteration")
    writer = MetricsWriter(args.out)
    writer.write(row)
    sys.stdout.write(writer.to_csv())
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": cmd_run, "sweep": cmd_sweep, "eval": cmd_eval}[args.command]
    try:
        return handler(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
