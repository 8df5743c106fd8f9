"""Command-line front end.

Subcommands: ``generate`` (synthetic day instances), ``train`` (instance
to policy file), ``evaluate`` (policy + instance to revenue stats),
``compare`` (experiment plan to result tables), ``distance`` (occupancy
files to distance scalars, or a budget curve for a policy).

Exit codes: 0 on success, 2 on validation/parse failures, 3 when a
solver ran out of iterations before converging (artifacts are still
written).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, io
from .imputation import IMPUTER_METHODS
from .io import FileFormatError, SynthConfig
from .model import validate_instance

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NO_CONVERGENCE = 3


def _load_instance_checked(path) -> "io.FleetInstance":
    instance = io.load_instance(path)
    problems = validate_instance(instance)
    if problems:
        raise FileFormatError("; ".join(problems))
    return instance


def _synth_config(args) -> SynthConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
        base.pop("version", None)
        base.pop("format", None)
        if "peaks" in base:
            base["peaks"] = tuple(io.DemandPeak(**p) for p in base["peaks"])
    overrides = {
        "num_zones": args.zones,
        "horizon": args.horizon,
        "num_agents": args.agents,
        "max_hours": args.max_hours,
        "max_breaks": args.max_breaks,
        "trips_per_day": args.trips_per_day,
        "seed": args.seed,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return SynthConfig(**base)


def cmd_generate(args) -> int:
    config = _synth_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for name, klass, cfg in evaluation.synthetic_month(config, num_days=args.days):
        instance, _ = io.generate_synthetic(cfg)
        fname = f"{name}.inst.gz"
        io.save_instance(instance, out / fname)
        manifest.append({"name": name, "class": klass, "file": fname,
                         "trips": instance.metadata.get("accepted_trips")})
        print(f"wrote {fname} ({klass}, {instance.metadata.get('accepted_trips')} trips)")
    with open(out / "manifest.json", "w") as fh:
        json.dump({"version": 1, "days": manifest,
                   "config": dataclasses.asdict(config)}, fh, indent=2, default=list)
    return EXIT_OK


def cmd_train(args) -> int:
    instance = _load_instance_checked(args.instance)
    method = args.method
    if method == "exact" and args.mode == "rigid":
        method = "rigid"
    elif method == "sbr":
        method = f"sbr:{args.imputer}"
    policy, report = evaluation.train_policy(
        instance,
        method,
        k=args.k,
        epsilon=args.epsilon,
        max_iters=args.max_iters,
        seed=args.seed,
        n_jobs=args.threads,
    )
    io.save_policy(policy, args.out)
    summary = {
        "method": method,
        "converged": report.converged,
        "iterations": report.iterations,
        "final_delta": report.final_delta,
        "value": report.value,
        "wall_time": report.wall_time,
    }
    report_path = Path(str(args.out)).with_suffix(".report.json")
    with open(report_path, "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary))
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


def cmd_evaluate(args) -> int:
    instance = _load_instance_checked(args.instance)
    policy = io.load_policy(args.policy)
    stats = evaluation.evaluate_policy(policy, instance, args.reps, args.seed)
    payload = {
        "mean_revenue_per_agent": stats.mean,
        "std": stats.std,
        "stderr": stats.stderr,
        "reps": stats.reps,
        "num_agents": stats.num_agents,
        "rep_means": stats.rep_means.tolist(),
    }
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
    print(json.dumps(payload))
    return EXIT_OK


def _load_plan(path) -> evaluation.ExperimentPlan:
    with open(path) as fh:
        raw = json.load(fh)
    root = Path(path).parent

    def tasks(entries):
        return [
            evaluation.DayTask(
                name=e["name"],
                day_class=e["class"],
                instance=_load_instance_checked(root / e["instance"]),
            )
            for e in entries
        ]

    return evaluation.ExperimentPlan(
        train_days=tasks(raw["train"]),
        test_days=tasks(raw["test"]),
        methods=list(raw["methods"]),
        reps=int(raw.get("reps", 5)),
        seed=int(raw.get("seed", 0)),
        k=int(raw.get("k", 500)),
        epsilon=float(raw.get("epsilon", 1e-3)),
        max_iters=int(raw.get("max_iters", 25)),
    )


def cmd_compare(args) -> int:
    plan = _load_plan(args.plan)
    table = evaluation.compare_methods(plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "cells.csv", out / "aggregates.csv")
    table.cells.to_json(out / "cells.json", orient="records", indent=2)
    mapping = evaluation.best_policy_per_day(table)
    with open(out / "best_policy_per_day.json", "w") as fh:
        json.dump(mapping, fh, indent=2)
    print(table.aggregates.to_string(index=False))
    return EXIT_OK


def cmd_distance(args) -> int:
    if args.budgets:
        if not (args.policy and args.instance):
            raise FileFormatError("curve mode needs --policy and --instance")
        instance = _load_instance_checked(args.instance)
        policy = io.load_policy(args.policy)
        trajectories, _ = evaluation.simulate(policy, instance, args.seed)
        budgets = [int(b) for b in args.budgets.split(",")]
        curve = evaluation.distance_vs_simulations(
            policy, instance, trajectories, budgets, k=args.k, seed=args.seed
        )
        if args.out:
            curve.to_csv(args.out, index=False)
        print(curve.to_string(index=False))
        return EXIT_OK
    if not (args.occupancy_a and args.occupancy_b):
        raise FileFormatError("pass two occupancy files, or --budgets for a curve")
    occ_a = io.load_occupancy(args.occupancy_a)
    occ_b = io.load_occupancy(args.occupancy_b)
    payload = {
        "mad": evaluation.occupancy_distance(occ_a, occ_b, "mad"),
        "js": evaluation.occupancy_distance(occ_a, occ_b, "js"),
        "js_log_base": "e",
    }
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
    print(json.dumps(payload))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetgame",
        description="taxi-fleet equilibrium policies: generate, train, evaluate, compare",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic day instances")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--days", type=int, default=28)
    p.add_argument("--zones", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--agents", type=int)
    p.add_argument("--max-hours", type=int, dest="max_hours")
    p.add_argument("--max-breaks", type=int, dest="max_breaks")
    p.add_argument("--trips-per-day", type=float, dest="trips_per_day")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a policy on one instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--method", choices=["exact", "sbr"], default="sbr")
    p.add_argument("--mode", choices=["flexible", "rigid"], default="flexible")
    p.add_argument("--imputer", choices=[m for m in IMPUTER_METHODS if m != "gain"],
                   default="supervised")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=500)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=25, dest="max_iters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="simulate a policy and report revenue stats")
    p.add_argument("--policy", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="run a train/test experiment plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("distance", help="occupancy distances (scalars or a budget curve)")
    p.add_argument("occupancy_a", nargs="?")
    p.add_argument("occupancy_b", nargs="?")
    p.add_argument("--policy")
    p.add_argument("--instance")
    p.add_argument("--budgets", help="comma-separated simulation budgets for a curve")
    p.add_argument("--k", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_distance)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
