"""Command-line interface: ``amsa {generate,validate,run,analyze,mfg}``.

Exit codes: 0 success, 1 validation or acceptance failure, 2 usage or runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .core import load_system, save_system
from .errors import AmsaError
from .experiment import (analyze, build_problem, build_schedule, bundled_config, dump_trajectory,
                         load_config, run_experiment)
from .schedules import StepSchedule

log = logging.getLogger("amsa")


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="experiment or problem config (JSON)")
    parser.add_argument("--out", default=default, help="output file or directory")
    parser.add_argument("--seeds", type=int, default=default, help="override the seed count")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="worker processes (results do not depend on this)")
    parser.add_argument("--quiet", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser():
    p = argparse.ArgumentParser(prog="amsa", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="emit a benchmark problem as JSON")
    _global_flags(g, suppress=True)
    g.add_argument("--family", choices=["nested_linear", "mfg"], default="nested_linear")
    g.add_argument("--N", type=int, default=2)
    g.add_argument("--dims", type=int, nargs="+")
    g.add_argument("--delta", type=float, default=0.5)
    g.add_argument("--coupling", type=float, default=0.1)
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--kernel", choices=["fixed", "theta-mixture"], default="fixed")
    g.add_argument("--m", type=int, default=5)
    g.add_argument("--epsilon", type=float, default=0.1)
    g.add_argument("--S", type=int, default=30)
    g.add_argument("--A", type=int, default=10)
    g.add_argument("--floor", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("validate", help="assumption validators and step-size condition report")
    _global_flags(v, suppress=True)
    v.add_argument("--problem", help="problem JSON (default: the problem of --config)")
    v.add_argument("--schedule", help="schedule JSON; default is the practical A-MSA schedule")
    v.add_argument("--D", type=float, default=1.0, help="sample bound used by the condition block")
    v.add_argument("--strict", action="store_true", help="fail when the condition block fails")

    r = sub.add_parser("run", help="execute an experiment config")
    _global_flags(r, suppress=True)
    r.add_argument("--horizon", type=int)
    r.add_argument("--dump", type=int, default=0, help="dump per-trajectory CSVs for this many seeds")

    a = sub.add_parser("analyze", help="re-fit rates from an existing run directory")
    _global_flags(a, suppress=True)
    a.add_argument("--window", type=int, nargs=2)
    a.add_argument("--quantity")

    m = sub.add_parser("mfg", help="run the synthetic mean-field-game comparison")
    _global_flags(m, suppress=True)
    m.add_argument("--horizon", type=int)
    return p


def _emit(obj, quiet):
    if not quiet:
        print(json.dumps(obj, indent=1, sort_keys=True, default=float))


def cmd_generate(args):
    if args.family == "nested_linear":
        from .problems import make_nested_linear
        system = make_nested_linear(args.N, args.dims, args.delta, args.coupling, args.sigma,
                                    args.kernel, args.seed, args.m, args.epsilon)
    else:
        from .problems import make_random_mfg, mfg_operator_system
        system = mfg_operator_system(make_random_mfg(args.S, args.A, args.seed, args.floor))
    if args.out:
        path = os.path.join(args.out, "problem.json") if os.path.isdir(args.out) else args.out
        save_system(system, path)
        if not args.quiet:
            print(path)
    else:
        print(json.dumps(system.to_dict()))
    return 0


def cmd_validate(args):
    from .diagnostics import assumption_report

    if args.problem:
        system = load_system(args.problem)
    elif args.config:
        system = build_problem(load_config(args.config)["problem"])
    else:
        raise AmsaError("validate needs --problem or --config")
    schedule = None
    if args.schedule:
        with open(args.schedule) as fh:
            schedule = StepSchedule.from_dict(json.load(fh))
    elif system.metadata.get("delta") is not None:
        schedule = build_schedule(system, "amsa")
    report = assumption_report(system, schedule=schedule, D=args.D)
    ok = report["delta_hat"] > 0 and report["checks"].get("affine_bound_at_solution", True)
    ok = ok and "error" not in report["checks"]["ergodicity"]
    if args.strict and "conditions" in report["checks"]:
        ok = ok and report["checks"]["conditions"]["pass"]
    report["pass"] = bool(ok)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True, default=float)
    _emit(report, args.quiet)
    return 0 if ok else 1


def _run_config(config, args):
    if args.seeds is not None:
        config["seeds"]["count"] = args.seeds
    if getattr(args, "horizon", None):
        config["horizon"] = args.horizon
    out = args.out or os.path.join("runs", config.get("name", "experiment"))
    res = run_experiment(config, out, threads=args.threads, quiet=args.quiet)
    if getattr(args, "dump", 0):
        system = res["system"]
        base = config["seeds"].get("base", 0)
        for solver in config["solvers"]:
            sched = build_schedule(system, solver, config.get("schedules", {}).get(solver))
            for seed in range(base, base + args.dump):
                dump_trajectory(system, sched, solver, config["horizon"], seed, out, config,
                                config.get("record_plan", "log"))
    _emit(res["summary"], args.quiet)
    return 0 if res["summary"]["pass"] else 1


def cmd_run(args):
    if not args.config:
        raise AmsaError("run needs --config")
    return _run_config(load_config(args.config), args)


def cmd_mfg(args):
    config = load_config(args.config) if args.config else bundled_config("mfg")
    if args.out is None:
        args.out = os.path.join("runs", "mfg")
    return _run_config(config, args)


def cmd_analyze(args):
    if not args.out:
        raise AmsaError("analyze needs --out pointing at a run directory")
    fits = analyze(args.out, tuple(args.window) if args.window else None, args.quantity)
    _emit({s: f.to_dict() for s, f in fits.items()}, args.quiet)
    return 0


COMMANDS = {"generate": cmd_generate, "validate": cmd_validate, "run": cmd_run,
            "analyze": cmd_analyze, "mfg": cmd_mfg}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with np.errstate(all="ignore"):
            return COMMANDS[args.command](args)
    except (AmsaError, OSError, ValueError, KeyError) as exc:
        print(f"amsa: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
