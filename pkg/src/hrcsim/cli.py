"""Scenario runner: `hrcsim validate|plan|run <scenario.json>`.

Exit codes are the machine contract: 0 success, 1 scenario-level failure
(violations, Unsolvable, non-Completed outcomes), 2 unusable input. Verdicts
and traces go to the declared outputs; stderr is for humans.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import formula as fm
from . import planner as pl
from . import scenario as sc
from .errors import PlanningError


def _load_doc(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        print(f"cannot parse {path}: {exc}", file=sys.stderr)
        return None


def cmd_validate(args) -> int:
    doc = _load_doc(args.scenario)
    if doc is None:
        return 2
    scenario, violations = sc.validate_scenario_dict(doc)
    report = {
        "scenario": args.scenario,
        "ok": scenario is not None,
        "violations": [{"location": loc, "message": msg} for loc, msg in violations],
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if scenario is not None else 1


def _load_for_run(path: str):
    doc = _load_doc(path)
    if doc is None:
        return None, 2
    scenario, violations = sc.validate_scenario_dict(doc)
    if scenario is None:
        for loc, msg in violations:
            print(f"{loc}: {msg}", file=sys.stderr)
        return None, 2
    return scenario, 0


def cmd_run(args) -> int:
    scenario, code = _load_for_run(args.scenario)
    if scenario is None:
        return code
    config = scenario.config
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.max_ticks is not None:
        config = replace(config, max_ticks=args.max_ticks)
    scenario.config = config
    harness = sc.build(scenario)
    verdict = sc.run(harness)
    if args.trace:
        Path(args.trace).write_text(harness.sim.trace.to_jsonl())
    if args.json_verdict:
        print(json.dumps(verdict, sort_keys=True, separators=(",", ":")))
    else:
        print(json.dumps(verdict, indent=2, sort_keys=True))
    return 0 if verdict["all_completed"] and not verdict["horizon_reached"] else 1


def cmd_plan(args) -> int:
    scenario, code = _load_for_run(args.scenario)
    if scenario is None:
        return code
    if args.task < 0 or args.task >= len(scenario.tasks):
        print(f"task index {args.task} out of range", file=sys.stderr)
        return 2
    harness = sc.build(scenario)
    task = scenario.tasks[args.task].task
    if not isinstance(task.precondition, fm.TrueFormula) and not fm.evaluate(
        task.precondition, harness.repository.world
    ):
        print("task precondition not satisfied by the initial map", file=sys.stderr)
        return 1
    try:
        plan = pl.plan(
            task,
            harness.registry,
            harness.repository.world,
            harness.store,
            budget=scenario.config.search_budget,
        )
    except PlanningError as exc:
        print(f"Unsolvable: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(plan.describe(), indent=2, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="hrcsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a scenario file")
    p_validate.add_argument("scenario")
    p_validate.set_defaults(func=cmd_validate)

    p_run = sub.add_parser("run", help="run a scenario to terminal outcomes")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--max-ticks", type=int, default=None)
    p_run.add_argument("--trace", default=None, help="write the event trace (JSON lines)")
    p_run.add_argument("--json-verdict", action="store_true",
                       help="compact single-line verdict")
    p_run.set_defaults(func=cmd_run)

    p_plan = sub.add_parser("plan", help="print the abstract plan without executing")
    p_plan.add_argument("scenario")
    p_plan.add_argument("task", type=int, nargs="?", default=0)
    p_plan.set_defaults(func=cmd_plan)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
