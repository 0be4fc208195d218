"""Benchmark command line: ``converge``, ``channel-compare`` and ``dfg``."""
from __future__ import annotations

import argparse
import logging
import sys

from .bench import (RunConfig, reynolds_number, run_channel_compare, run_convergence_study,
                    run_dfg)
from .stepper import StepError

log = logging.getLogger("gccns")

COMMANDS = {"converge": "converge", "channel-compare": "channelCompare", "dfg": "dfg"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gccns-bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with RunConfig keys; flags override it")
        p.add_argument("--scheme", choices=("gcc13", "cgp1"))
        p.add_argument("--bc", choices=("strong", "nitsche"))
        p.add_argument("--levels", type=int,
                       help="number of refinement levels (converge) or mesh resolution (channel runs)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--deterministic", action="store_true", default=None,
                       help="single-threaded, order-fixed assembly")
        p.add_argument("--T", type=float, dest="T", help="final time")
        p.add_argument("--tau", type=float, help="time step (channel runs)")
        p.add_argument("--degree", type=int, dest="r", help="velocity degree r")
        p.add_argument("--nu", type=float, help="viscosity")
        p.add_argument("--sample-step", type=float, dest="sample_step",
                       help="relative sampling step for the L-infinity time norm")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    scenario = COMMANDS[args.command]
    base = RunConfig.defaults(scenario)
    if args.config:
        base = RunConfig.from_ini(args.config, base)
        if base.scenario != scenario:
            raise ValueError(f"config scenario {base.scenario!r} does not match command {args.command!r}")
    kw = {k: getattr(args, k) for k in ("scheme", "bc", "out", "deterministic", "T", "tau", "r", "nu",
                                         "sample_step")}
    if args.levels is not None:
        kw["levels" if scenario == "converge" else "resolution"] = args.levels
    return base.updated(**kw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    re = reynolds_number(config.mean_velocity, config.length_scale, config.nu)
    print(f"{args.command}: Re = {re:.6g}, scheme {config.scheme}, bc {config.bc}, out {config.out}")
    if config.scenario == "converge":
        report = run_convergence_study(config)
        for row in report.rows:
            print(f"level {row['level']}: dofs {row['dofs']}  v_L2L2 {row['v_L2L2']:.4e} "
                  f"(eoc {row['eoc_v_L2L2']:.2f})  p_L2L2 {row['p_L2L2']:.4e} (eoc {row['eoc_p_L2L2']:.2f})")
        failed = any("error" in row for row in report.rows)
        return 1 if failed else 0
    try:
        if config.scenario == "channelCompare":
            res = run_channel_compare(config)
            print(f"relative difference: speed {res.rel_diff_speed:.3e}, pressure {res.rel_diff_pressure:.3e}")
            return 0
        res = run_dfg(config)
    except StepError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"{res.steps} steps, max Newton iterations {res.max_newton_iterations}, "
          f"final c_D {res.c_drag[-1]:.6g}, c_L {res.c_lift[-1]:.6g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
