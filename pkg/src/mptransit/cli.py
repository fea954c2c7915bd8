"""Command line interface: run, sweep, calibrate, check-region, validate."""

from __future__ import annotations

import argparse
import os
import sys

from .analysis import RegionCheckError, admissible_region_check, demand_vector_from_scenario
from .harness import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    ENV_OUT_DIR,
    RunDescriptor,
    SweepDescriptor,
    calibrate,
    run,
    sweep,
)
from .network import ConfigurationError
from .scenario import load_scenario, validate_network


def _add_run_args(p):
    p.add_argument("--scenario", required=True, help="scenario YAML file")
    p.add_argument("--controller", default=None,
                   help="override controller variant (cv-mp, transit-mp, "
                        "mtransit-mp, occ-mp, eocc-mp)")
    p.add_argument("--penetration", type=float, default=None,
                   help="override global CV penetration rate")
    p.add_argument("--segmentation", default=None,
                   help="segmentation tag S0..S5 or custom length in m")
    p.add_argument("--error-level", type=float, default=None,
                   help="systematic parameter error level, e.g. -0.2")
    p.add_argument("--seeds", default="1", help="comma-separated seed list")
    p.add_argument("--horizon", type=float, default=None, help="override horizon (s)")
    p.add_argument("--warmup", type=float, default=None, help="override warmup (s)")
    p.add_argument("--stats", default=None, help="historical stats CSV override")
    p.add_argument("--demand-scale", type=float, default=None,
                   help="multiply all demand rates by this factor")
    p.add_argument("--snapshots", action="store_true",
                   help="also write per-movement snapshot CSVs")
    p.add_argument("--out", default=None,
                   help=f"output directory (default: ${ENV_OUT_DIR} or ./out)")
    p.add_argument("--workers", type=int, default=1, help="parallel runs in sweeps")
    p.add_argument("--name", default=None, help="run name for the artifact folder")


def _descriptor(args) -> RunDescriptor:
    seeds = tuple(int(s) for s in str(args.seeds).split(",") if s != "")
    return RunDescriptor(
        scenario_path=args.scenario,
        controller=args.controller,
        penetration=args.penetration,
        segmentation=args.segmentation,
        error_level=args.error_level,
        seeds=seeds,
        horizon=args.horizon,
        warmup=args.warmup,
        out_dir=args.out,
        stats_path=args.stats,
        demand_scale=args.demand_scale,
        snapshots=args.snapshots,
        workers=args.workers,
        name=args.name,
    )


def _parse_values(axis, raw):
    values = [v for v in str(raw).split(",") if v != ""]
    if axis in ("penetration", "error_level"):
        return tuple(float(v) for v in values)
    return tuple(values)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mptransit",
        description="Mesoscopic max-pressure signal control experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="single run (all seeds)")
    _add_run_args(p_run)

    p_sweep = sub.add_parser("sweep", help="axis sweep")
    _add_run_args(p_sweep)
    p_sweep.add_argument("--axis", required=True,
                         choices=SweepDescriptor.AXES)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_sweep.add_argument("--controllers", default=None,
                         help="comma-separated controllers to cross with the axis")

    p_cal = sub.add_parser("calibrate", help="emit historical stats from a run")
    p_cal.add_argument("--scenario", required=True)
    p_cal.add_argument("--horizon", type=float, default=None)
    p_cal.add_argument("--t-tod", type=float, default=1800.0,
                       help="time-of-day window length (s)")
    p_cal.add_argument("--seed", type=int, default=0)
    p_cal.add_argument("--out", required=True, help="stats CSV to write")

    p_region = sub.add_parser("check-region",
                              help="admissible demand region LP check")
    p_region.add_argument("--scenario", required=True)
    p_region.add_argument("--demand-scale", type=float, default=1.0)
    p_region.add_argument("--pi-min", type=float, default=None)
    p_region.add_argument("--pi-max", type=float, default=None)

    p_val = sub.add_parser("validate", help="validate a scenario file")
    p_val.add_argument("--scenario", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RegionCheckError as exc:
        print(f"region check failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args) -> int:
    if args.command == "run":
        summary = run(_descriptor(args))
        agg = summary["aggregate"]
        print(f"run {summary['name']}: controller={summary['controller']} "
              f"seeds={summary['seeds']}")
        if agg:
            print(f"  max spillover {agg['max_spillover']:.1f}  "
                  f"max unserved {agg['max_unserved']:.1f}  "
                  f"mean delay {agg['mean_delay']:.1f} s  "
                  f"verdict {agg['stability_verdict']}")
        if summary["failures"]:
            for f in summary["failures"]:
                print(f"  seed {f['seed']} FAILED: {f['error']}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK

    if args.command == "sweep":
        desc = SweepDescriptor(
            base=_descriptor(args),
            axis=args.axis,
            values=_parse_values(args.axis, args.values),
            controllers=tuple(args.controllers.split(",")) if args.controllers else (),
        )
        rows = sweep(desc)
        out = args.out or os.environ.get(ENV_OUT_DIR, "out")
        print(f"{len(rows)} sweep groups written to {os.path.join(out, 'sweep.csv')}")
        return EXIT_OK

    if args.command == "calibrate":
        scenario = load_scenario(args.scenario)
        stats = calibrate(scenario, horizon=args.horizon, t_tod=args.t_tod,
                          seed=args.seed)
        stats.to_csv(args.out)
        n = len(stats.by_movement)
        print(f"calibrated {n} movements -> {args.out}")
        return EXIT_OK

    if args.command == "check-region":
        scenario = load_scenario(args.scenario)
        demand = demand_vector_from_scenario(scenario)
        demand = {k: v * args.demand_scale for k, v in demand.items()}
        cert = admissible_region_check(scenario.network, demand,
                                       pi_min=args.pi_min, pi_max=args.pi_max)
        print(cert.report())
        return EXIT_OK if cert.feasible else EXIT_RUNTIME

    if args.command == "validate":
        scenario = load_scenario(args.scenario)
        violations = validate_network(scenario)
        if violations:
            for v in violations:
                print(v)
            return EXIT_CONFIG
        print(f"{scenario.name}: valid "
              f"({len(scenario.network.movements)} movements, "
              f"{len(scenario.network.nodes)} nodes)")
        return EXIT_OK

    raise ConfigurationError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
