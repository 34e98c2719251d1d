"""Command-line entry point: ``stochbed run | compare | oracle | report``.

Settings come from an optional key-value config file (section
``[experiment]``; keys are the long flag names with ``_`` for ``-``) and
are overridden by flags given on the command line. Example config::

    [experiment]
    problem = synthetic1d
    method = seq-vhgpr
    n_init = 40
    n_iter = 60
    reps = 20
    seed = 0
    out = results

Exit status is 0 only if every replication succeeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields

from stochbed.design import METHODS
from stochbed.experiment import PROBLEMS, ExperimentConfig, UsageError, compare, make_problem, oracle_value, run_experiment
from stochbed.waves import read_config

EXIT_FAILED_RUNS = 1
EXIT_USAGE = 2

_FIELD_TYPES = {"n_init": int, "n_iter": int, "reps": int, "seed": int, "jobs": int, "n_candidates": int, "threshold": float, "oracle_n": int, "ship_hours": float, "ship_dt": float, "ship_seed": int}


def _add_common(p: argparse.ArgumentParser, method=True):
    p.add_argument("--config", help="key-value config file with an [experiment] section")
    p.add_argument("--problem", choices=PROBLEMS)
    if method:
        p.add_argument("--method", choices=METHODS)
    p.add_argument("--n-init", type=int)
    p.add_argument("--n-iter", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.add_argument("--n-candidates", type=int)
    p.add_argument("--design", choices=("box", "density"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--oracle-n", type=int)
    p.add_argument("--ship-hours", type=float, help="ship record length in hours (150 desk scale, 1500 full)")
    p.add_argument("--ship-dt", type=float)
    p.add_argument("--ship-seed", type=int)
    p.add_argument("--ship-absolute", action="store_true", default=None, help="use max |roll| as the response")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochbed", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="replicated runs of one method"))
    p = sub.add_parser("compare", help="several methods on identical seeds and budgets")
    _add_common(p, method=False)
    p.add_argument("--methods", default=",".join(METHODS), help="comma-separated method list")
    p = sub.add_parser("oracle", help="reference exceedance probability of a problem")
    _add_common(p, method=False)
    p = sub.add_parser("report", help="render figures from the CSVs in an output directory")
    p.add_argument("--out", required=True)
    return parser


def config_from_args(args) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        sections = read_config(args.config)
        values.update(sections.get("experiment", {}))
        for k, v in sections.get("ship", {}).items():
            values[f"ship_{k}"] = v
    names = {f.name for f in fields(ExperimentConfig)}
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    for k, typ in _FIELD_TYPES.items():
        if k in values and values[k] is not None:
            values[k] = typ(values[k])
    return ExperimentConfig.from_mapping(values)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            from stochbed.plotting import render_report

            for path in render_report(args.out):
                print(path)
            return 0
        cfg = config_from_args(args)
        if args.command == "run":
            res = run_experiment(cfg)
            final = res.final_values()
            print(f"{cfg.tag}: {len(final)}/{cfg.reps} runs complete; oracle {res.summary.oracle:.6g}; final mean {res.summary.mean[-1]:.6g} std {res.summary.std[-1]:.3g}")
            if res.failed:
                print(f"failed replications: {res.failed}", file=sys.stderr)
            return 0 if res.ok else EXIT_FAILED_RUNS
        if args.command == "compare":
            comp = compare([m.strip() for m in args.methods.split(",") if m.strip()], cfg)
            sys.stdout.write(comp.to_csv())
            return 0 if comp.ok else EXIT_FAILED_RUNS
        if args.command == "oracle":
            est = oracle_value(make_problem(cfg), cfg)
            print(json.dumps({"problem": cfg.problem} | asdict(est)))
            return 0
    except UsageError as exc:
        print(f"stochbed: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
