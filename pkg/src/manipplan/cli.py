"""Command-line interface: plan, compare, sweep, and validate scenarios."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .scenario import (
    GOAL_TOLERANCE,
    Scenario,
    load_scenario,
    run_comparison,
    run_interp_sweep,
    run_scenario,
)


def _default_out(scenario: Scenario, verb: str) -> Path:
    return Path("runs") / scenario.name / verb


def _print_run(label: str, run) -> None:
    stats = run.stats
    conv = "prior (not optimized)" if run.report is None else (
        f"converged in {run.report.iterations} it" if run.report.converged else "DID NOT CONVERGE"
    )
    line = f"  {label:<18} {conv}; lambda mean {stats.mean:.4f} min {stats.minimum:.4f}"
    line += f"; goal error {run.goal_error:.2e} m"
    if run.collision_free is not None:
        line += f"; collision-free: {run.collision_free}"
    print(line)


def _cmd_plan(args) -> int:
    scenario = load_scenario(args.scenario)
    out = Path(args.out) if args.out else _default_out(scenario, "plan")
    result = run_scenario(scenario, out)
    print(f"scenario {scenario.name}: artifacts in {out}")
    _print_run("plan", result)
    return 0 if result.success else 1


def _cmd_compare(args) -> int:
    scenario = load_scenario(args.scenario)
    out = Path(args.out) if args.out else _default_out(scenario, "compare")
    result = run_comparison(scenario, out)
    print(f"scenario {scenario.name}: artifacts in {out}")
    _print_run("prior", result.prior)
    _print_run("baseline", result.baseline)
    _print_run("singularity-aware", result.aware)
    print(f"  normalization constant: {result.normalization:.6f}")
    return 0 if (result.baseline.converged and result.aware.converged) else 1


def _cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    counts = [int(v) for v in args.interp.split(",") if v.strip() != ""]
    out = Path(args.out) if args.out else _default_out(scenario, "sweep")
    result = run_interp_sweep(scenario, counts, out)
    print(f"scenario {scenario.name}: artifacts in {out}")
    _print_run("prior", result.prior)
    for count, run in zip(result.counts, result.runs):
        _print_run(f"n_interp={count}", run)
    return 0 if all(run.converged for run in result.runs) else 1


def _cmd_validate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        chain = scenario.load_chain()
    except Exception as exc:  # jsonschema/model/value errors all end up here
        print(f"INVALID: {exc}", file=sys.stderr)
        return 2
    print(
        f"OK: scenario {scenario.name!r}, robot {chain.name!r} ({chain.n} joints), "
        f"{scenario.num_support} support states, n_interp {scenario.n_interp}, "
        f"{len(scenario.obstacles)} obstacle(s), goal tolerance {GOAL_TOLERANCE} m"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="manipplan",
        description="Singularity-avoiding trajectory optimization for serial manipulators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("plan", help="optimize one scenario and export artifacts")
    plan.add_argument("scenario", help="scenario JSON path or built-in name")
    plan.add_argument("--out", help="artifact directory (default runs/<name>/plan)")
    plan.set_defaults(func=_cmd_plan)

    compare = sub.add_parser("compare", help="run prior / baseline / singularity-aware and align profiles")
    compare.add_argument("scenario", help="scenario JSON path or built-in name")
    compare.add_argument("--out", help="artifact directory (default runs/<name>/compare)")
    compare.set_defaults(func=_cmd_compare)

    sweep = sub.add_parser("sweep", help="re-plan over several interpolated-state counts")
    sweep.add_argument("scenario", help="scenario JSON path or built-in name")
    sweep.add_argument("--interp", default="0,2,4,8", help="comma-separated counts (default 0,2,4,8)")
    sweep.add_argument("--out", help="artifact directory (default runs/<name>/sweep)")
    sweep.set_defaults(func=_cmd_sweep)

    validate = sub.add_parser("validate", help="check a scenario file against the schema and model")
    validate.add_argument("scenario", help="scenario JSON path or built-in name")
    validate.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
