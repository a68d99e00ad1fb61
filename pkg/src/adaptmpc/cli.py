"""Command-line entry point: ``adaptmpc <subcommand> [options]``."""

import argparse
import json
import logging
import sys

from adaptmpc import experiments as ex


def _common(p):
    p.add_argument("--config", help="JSON config file (merged over the defaults)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                   help="override a config entry by dot-path, e.g. mpc.horizon=15")
    p.add_argument("--seed", type=int, help="base seed; trial n uses seed + n")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for trials")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="adaptmpc",
                                     description="Adaptive MPC with learned dynamics priors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect-data", help="collect every task dataset")
    _common(p)

    p = sub.add_parser("train-prior", help="fit one prior with its task held out")
    _common(p)
    p.add_argument("--env", required=True, help="held-out task / environment id")
    p.add_argument("--family", required=True, choices=ex.FAMILIES)

    p = sub.add_parser("run-matrix", help="prior family x adaptation comparison")
    _common(p)
    p.add_argument("--dry-run", action="store_true", help="validate and emit an empty table")

    p = sub.add_parser("robustness", help="target-offset sweep")
    _common(p)
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("replay", help="re-run a logged trial and compare")
    p.add_argument("log", help="trial_<n>.jsonl written by run-matrix or robustness")
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args):
    cfg = ex.load_config(args.config)
    for item in args.set:
        ex.set_path(cfg, item)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "dry_run", False):
        cfg["trials"] = 0
    ex.validate_config(cfg)
    return cfg


def _print_cells(cells):
    print(f"{'env':<13}{'family':<10}{'adapt':<7}{'offset':>8}{'success':>10}  95% CI")
    for c in cells:
        ci = "" if c["trials"] == 0 else f"[{c['ci_low']:.2f}, {c['ci_high']:.2f}]"
        print(f"{c['env']:<13}{c['family']:<10}{str(c['adapt']):<7}{c['offset']:>8.3f}"
              f"{c['successes']:>6}/{c['trials']:<3}  {ci}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            res = ex.cmd_replay(args.log, args.tol)
            print(json.dumps(res))
            return 0 if res["match"] else 1
        cfg = resolve_config(args)
        if args.command == "collect-data":
            for item in ex.cmd_collect_data(cfg, args.out):
                print(f"{item['path']}: {item['records']} records")
        elif args.command == "train-prior":
            print(json.dumps(ex.cmd_train_prior(cfg, args.out, args.env, args.family),
                             indent=2, sort_keys=True))
        elif args.command == "run-matrix":
            _print_cells(ex.cmd_run_matrix(cfg, args.out, args.jobs))
        elif args.command == "robustness":
            _print_cells(ex.cmd_robustness(cfg, args.out, args.jobs))
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
