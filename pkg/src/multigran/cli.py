"""Command-line entry point: ``multigran <command> --config FILE --seed N [--set key=value ...]``.

Exit codes: 0 success, 1 runtime failure (partial results kept), 2 bad
usage or configuration, 3 unreadable or corrupted input file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import write_dataset
from .errors import ConfigError, FormatError, InfeasiblePlanError
from .experiment import DEFAULT_CONFIG, ExperimentConfig, evaluate_plan, generate_split, render_table, report, run_experiment
from .tokens import ReductionPlan

STOCHASTIC = ("gen-data", "train", "eval", "sweep", "ablate", "run")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multigran", description="Multi-granularity visual token experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON config file (defaults apply to missing keys)")
        sp.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set stage2.epochs=4 (value parsed as JSON)")
        sp.add_argument("--out", type=Path, help="output directory (overrides output_dir)")

    sp = sub.add_parser("gen-data", help="write the train/test datasets to disk")
    common(sp)
    sp.add_argument("--split", choices=("train", "test", "both"), default="both")

    sp = sub.add_parser("train", help="prepare tokens and train the mask and patch-only models")
    common(sp)

    sp = sub.add_parser("eval", help="evaluate one reduction plan against the stored checkpoint")
    common(sp)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--plan", help="reduction plan as JSON")
    g.add_argument("--plan-name", help="name of a plan from the config")

    sp = sub.add_parser("sweep", help="evaluate every configured plan and the baselines")
    common(sp)
    sp = sub.add_parser("ablate", help="token-composition and mask-type ablations")
    common(sp)
    sp = sub.add_parser("run", help="train, sweep and ablate in one go")
    common(sp)

    sp = sub.add_parser("report", help="re-render tables from a results JSON file")
    sp.add_argument("results", type=Path)

    sub.add_parser("init-config", help="print the default config")
    return p


def _config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(str(args.out))}")
    if args.config is None:
        from .experiment import apply_overrides

        return ExperimentConfig.from_dict(apply_overrides({}, overrides), args.seed)
    return ExperimentConfig.load(args.config, args.seed, overrides)


def _dispatch(args) -> int:
    if args.command == "init-config":
        print(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True))
        return 0
    if args.command == "report":
        print(report(args.results), end="")
        return 0
    cfg = _config(args)
    if args.command == "gen-data":
        splits = ("train", "test") if args.split == "both" else (args.split,)
        for split in splits:
            path = write_dataset(generate_split(cfg, split), cfg.output_dir / "data" / split)
            print(f"{split}: {path}")
        return 0
    if args.command == "eval":
        if args.plan is not None:
            try:
                plan, name = ReductionPlan.from_dict(json.loads(args.plan)), "plan"
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad --plan: {exc}") from exc
        else:
            named = {p.name: p.plan for p in cfg.plans}
            if args.plan_name not in named:
                raise ConfigError(f"no plan named {args.plan_name!r}; have {sorted(named)}")
            plan, name = named[args.plan_name], args.plan_name
        print(render_table([evaluate_plan(cfg, plan, name)]), end="")
        return 0
    stages = {"train": ("train",), "sweep": ("sweep",), "ablate": ("ablate",), "run": ("train", "sweep", "ablate")}[args.command]
    stem = "results" if args.command == "run" else args.command
    results = run_experiment(cfg, stages, stem)
    if results["rows"]:
        print(render_table(results["rows"]), end="")
    print(f"results in {cfg.output_dir}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, InfeasiblePlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # partial results were already written by run_experiment
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
