"""Scenario documents: one JSON file describes one reproducible experiment.

Sections: config, ontology extensions, the initial map, providers with their
services, tasks, safeguards, a failure schedule, exogenous events, and
scheduled cancellations. Formulas are strings in the concrete syntax of the
formula module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import formula as fm
from . import ontology as on
from . import safeguards as sgm
from . import services as sv
from .errors import HrcError, ScenarioError
from .frp import OUTCOME_COMPLETED, TaskManager
from .registry import ServiceRegistry
from .simenv import (
    Config,
    Environment,
    EventTrace,
    ExogenousEvent,
    FailureEntry,
    FailureSchedule,
    Repository,
    Simulation,
    inject_failure,
)

RESERVED_ACTOR_IDS = {"tm", "safeguards", "env", "repository"}


@dataclass
class ScenarioTask:
    task: fm.Task
    submit_tick: int = 0
    deadline: int | None = None


@dataclass
class Scenario:
    ontology: on.Ontology
    world: on.WorldMap
    providers: list[sv.Provider]
    tasks: list[ScenarioTask]
    safeguards: list[sgm.Safeguard]
    failures: FailureSchedule
    events: list[ExogenousEvent]
    cancellations: list[tuple[int, int]]  # (task index, tick)
    config: Config


@dataclass
class Harness:
    scenario: Scenario
    sim: Simulation
    env: Environment
    repository: Repository
    registry: ServiceRegistry
    store: sgm.SafeguardStore
    tm: TaskManager
    provider_actors: dict[str, sv.ProviderActor]
    task_txns: list[str] = field(default_factory=list)
    achievability: list[sgm.AchievabilityReport] = field(default_factory=list)


class _Collector:
    def __init__(self):
        self.violations: list[tuple[str, str]] = []

    def add(self, location: str, message: str) -> None:
        self.violations.append((location, message))


def _parse_formula(text, location: str, ontology: on.Ontology | None, errs: _Collector):
    if not isinstance(text, str) or not text.strip():
        errs.add(location, "expected a formula string")
        return None
    try:
        parsed = fm.parse(text)
        if ontology is not None:
            fm.validate_formula(parsed, ontology)
        return parsed
    except HrcError as exc:
        errs.add(location, str(exc))
        return None


def _build_ontology(doc: dict, errs: _Collector) -> on.Ontology:
    ontology = on.builtin_ontology()
    section = doc.get("ontology", {})
    for i, spec in enumerate(section.get("attributes", [])):
        loc = f"/ontology/attributes/{i}"
        try:
            rng = spec.get("range")
            ontology = on.register_attribute(
                ontology,
                on.AttributeDef(
                    spec["name"],
                    spec.get("domain", "number"),
                    unit=spec.get("unit"),
                    number_range=tuple(rng) if rng else None,
                    allowed=frozenset(spec["allowed"]) if spec.get("allowed") else None,
                ),
            )
        except (HrcError, KeyError, TypeError) as exc:
            errs.add(loc, str(exc))
    for i, spec in enumerate(section.get("relations", [])):
        loc = f"/ontology/relations/{i}"
        try:
            arity = int(spec["arity"])
            kinds = tuple(spec.get("argument_kinds", ["object"] * arity))
            ontology = on.register_relation(
                ontology,
                on.RelationDef(
                    spec["name"],
                    arity,
                    kinds,
                    semantics="extensional",
                    invertible=bool(spec.get("invertible", True)),
                ),
            )
        except (HrcError, KeyError, TypeError, ValueError) as exc:
            errs.add(loc, str(exc))
    for i, spec in enumerate(section.get("types", [])):
        loc = f"/ontology/types/{i}"
        try:
            uses = tuple(
                on.AttributeUse(
                    u["name"],
                    number_range=tuple(u["range"]) if u.get("range") else None,
                    allowed=frozenset(u["allowed"]) if u.get("allowed") else None,
                    required=bool(u.get("required", True)),
                )
                for u in spec.get("attributes", [])
            )
            subs = tuple(
                on.SubobjectSpec(
                    s["role"], s["type"], int(s.get("min", 1)), bool(s.get("exact", False))
                )
                for s in spec.get("subobjects", [])
            )
            constraints = []
            for j, c in enumerate(spec.get("constraints", [])):
                parsed = _parse_formula(c, f"{loc}/constraints/{j}", ontology, errs)
                if parsed is not None:
                    constraints.append(parsed)
            ontology = on.register_type(
                ontology,
                on.TypeDef(
                    spec["name"],
                    spec.get("parent", on.ROOT),
                    spec.get("kind", "abstract-leaf"),
                    attributes=uses,
                    subobjects=subs,
                    constraints=tuple(constraints),
                ),
            )
        except (HrcError, KeyError, TypeError) as exc:
            errs.add(loc, str(exc))
    return ontology


def _build_map(doc: dict, ontology: on.Ontology, errs: _Collector) -> on.WorldMap:
    section = doc.get("map", {})
    objects = []
    for i, spec in enumerate(section.get("objects", [])):
        loc = f"/map/objects/{i}"
        try:
            subs: dict[str, tuple[str, ...]] = {}
            for role, ids in spec.get("subobjects", {}).items():
                subs[role] = tuple(ids) if isinstance(ids, list) else (ids,)
            objects.append(
                on.ObjectInstance(
                    spec["id"], spec["type"], dict(spec.get("attributes", {})), subs
                )
            )
        except (KeyError, TypeError) as exc:
            errs.add(loc, str(exc))
    tuples = []
    for i, spec in enumerate(section.get("tuples", [])):
        loc = f"/map/tuples/{i}"
        try:
            relation, args = spec
            tuples.append((relation, tuple(args)))
        except (TypeError, ValueError):
            errs.add(loc, "expected [relation, [args...]]")
    try:
        world = on.build_map(ontology, objects, tuples)
    except HrcError as exc:
        errs.add("/map", str(exc))
        return on.build_map(ontology, [], [])
    report = on.validate_map(ontology, world)
    for violation in report.violations:
        errs.add("/map", f"{violation.object_id}: {violation.rule}: {violation.message}")
    return world


def _build_providers(doc: dict, ontology: on.Ontology, world: on.WorldMap,
                     errs: _Collector) -> list[sv.Provider]:
    providers = []
    seen_ids = set()
    for i, spec in enumerate(doc.get("providers", [])):
        loc = f"/providers/{i}"
        pid = spec.get("id")
        if not pid or not isinstance(pid, str):
            errs.add(loc, "provider id required")
            continue
        if pid in seen_ids or pid in RESERVED_ACTOR_IDS:
            errs.add(loc, f"provider id {pid!r} duplicated or reserved")
            continue
        seen_ids.add(pid)
        kind = spec.get("kind", "device")
        if kind not in ("device", "human"):
            errs.add(loc, f"provider kind {kind!r} must be device or human")
            continue
        world_object = spec.get("world_object", "")
        if world_object not in world.objects:
            errs.add(loc, f"world_object {world_object!r} not in map")
        services = []
        durations = {}
        for j, s in enumerate(spec.get("services", [])):
            sloc = f"{loc}/services/{j}"
            pre = _parse_formula(s.get("precondition", "true"), f"{sloc}/precondition",
                                 ontology, errs)
            eff = _parse_formula(s.get("effect", "true"), f"{sloc}/effect", ontology, errs)
            if pre is None or eff is None:
                continue
            rng = s.get("operation_range")
            try:
                desc = sv.ServiceDescription(
                    type_name=s.get("type_name") or s.get("type", ""),
                    kind=sv.ServiceKind(s.get("kind", "physical")),
                    precondition=pre,
                    effect=eff,
                    inputs=tuple((n, t) for n, t in s.get("inputs", [])),
                    outputs=tuple((n, t) for n, t in s.get("outputs", [])),
                    attributes=sv.ServiceAttributes(
                        cost=float(s.get("cost", 1.0)),
                        avg_realization_time=int(s.get("avg_time", 1)),
                        operation_range=frozenset(rng) if rng is not None else None,
                    ),
                )
                desc.validate(ontology)
            except (HrcError, ValueError, TypeError) as exc:
                errs.add(sloc, str(exc))
                continue
            services.append(desc)
            if "duration" in s:
                durations[desc.type_name] = int(s["duration"])
        providers.append(
            sv.Provider(pid, kind, world_object, tuple(services),
                        int(spec.get("capacity", 1)), durations)
        )
    return providers


def _build_tasks(doc: dict, ontology: on.Ontology, errs: _Collector) -> list[ScenarioTask]:
    tasks = []
    for i, spec in enumerate(doc.get("tasks", [])):
        loc = f"/tasks/{i}"
        pre = _parse_formula(spec.get("precondition", "true"), f"{loc}/precondition",
                             ontology, errs)
        eff = _parse_formula(spec.get("effect", ""), f"{loc}/effect", ontology, errs)
        if pre is None or eff is None:
            continue
        if fm.free_variables(pre) or fm.free_variables(eff):
            errs.add(loc, "task formulas must be ground")
            continue
        tasks.append(
            ScenarioTask(fm.Task(pre, eff), int(spec.get("submit_tick", 0)),
                         spec.get("deadline"))
        )
    return tasks


def _build_safeguards(doc: dict, ontology: on.Ontology, errs: _Collector) -> list[sgm.Safeguard]:
    out = []
    for i, spec in enumerate(doc.get("safeguards", [])):
        loc = f"/safeguards/{i}"
        critical = _parse_formula(spec.get("critical", ""), f"{loc}/critical", ontology, errs)
        alternatives = []
        for j, text in enumerate(spec.get("safe", [])):
            parsed = _parse_formula(text, f"{loc}/safe/{j}", ontology, errs)
            if parsed is not None:
                alternatives.append(parsed)
        if critical is None or len(alternatives) != len(spec.get("safe", [])) or not alternatives:
            if not spec.get("safe"):
                errs.add(loc, "at least one safe formula required")
            continue
        scope = spec.get("scope")
        sg = sgm.Safeguard(
            spec.get("id", f"sg{i}"), critical, tuple(alternatives),
            frozenset(scope) if scope else None,
        )
        try:
            sg.validate(ontology)
        except HrcError as exc:
            errs.add(loc, str(exc))
            continue
        out.append(sg)
    return out


def _build_failures(doc: dict, providers: list[sv.Provider],
                    errs: _Collector) -> FailureSchedule:
    known = {p.id for p in providers}
    entries = []
    for i, spec in enumerate(doc.get("failures", [])):
        loc = f"/failures/{i}"
        pid = spec.get("provider", "")
        if pid not in known:
            errs.add(loc, f"unknown provider {pid!r}")
            continue
        try:
            entries.append(
                FailureEntry(
                    provider_id=pid,
                    mode=spec.get("mode", "SilentFailure"),
                    trigger_tick=spec.get("tick"),
                    trigger_ordinal=spec.get("ordinal"),
                    fraction=float(spec.get("fraction", 0.5)),
                    silent=bool(spec.get("silent", False)),
                )
            )
        except ValueError as exc:
            errs.add(loc, str(exc))
    return FailureSchedule(tuple(entries))


def validate_scenario_dict(doc: dict) -> tuple[Scenario | None, list[tuple[str, str]]]:
    """Validate every section; returns the scenario (when buildable) and the
    list of (json-pointer location, message) violations."""
    errs = _Collector()
    if not isinstance(doc, dict):
        return None, [("/", "scenario document must be a JSON object")]
    cfg_spec = doc.get("config", {})
    try:
        config = Config(
            seed=int(cfg_spec.get("seed", 0)),
            max_ticks=int(cfg_spec.get("max_ticks", 300)),
            timeout_ticks=int(cfg_spec.get("timeout_ticks", 10)),
            response_bound=int(cfg_spec.get("response_bound", 20)),
            search_budget=int(cfg_spec.get("search_budget", 100_000)),
            arrangement_timeout=int(cfg_spec.get("arrangement_timeout", 5)),
            commitment_ttl=int(cfg_spec.get("commitment_ttl", 100)),
            replan_limit=int(cfg_spec.get("replan_limit", 25)),
        )
    except (TypeError, ValueError) as exc:
        errs.add("/config", str(exc))
        config = Config()
    ontology = _build_ontology(doc, errs)
    world = _build_map(doc, ontology, errs)
    providers = _build_providers(doc, ontology, world, errs)
    tasks = _build_tasks(doc, ontology, errs)
    guards = _build_safeguards(doc, ontology, errs)
    failures = _build_failures(doc, providers, errs)
    events = []
    for i, spec in enumerate(doc.get("events", [])):
        loc = f"/events/{i}"
        eff = _parse_formula(spec.get("effect", ""), f"{loc}/effect", ontology, errs)
        if eff is None:
            continue
        if fm.free_variables(eff):
            errs.add(loc, "exogenous effects must be ground")
            continue
        events.append(ExogenousEvent(int(spec.get("tick", 0)), eff))
    cancellations = []
    for i, spec in enumerate(doc.get("cancellations", [])):
        loc = f"/cancellations/{i}"
        idx = int(spec.get("task", 0))
        if idx < 0 or idx >= len(tasks):
            errs.add(loc, f"task index {idx} out of range")
            continue
        cancellations.append((idx, int(spec.get("tick", 0))))
    if not doc.get("tasks") and not guards:
        errs.add("/tasks", "scenario declares neither tasks nor safeguards")
    scenario = Scenario(
        ontology, world, providers, tasks, guards, failures, events, cancellations, config
    )
    return (scenario if not errs.violations else None), errs.violations


def load_scenario(path: str | Path) -> Scenario:
    doc = json.loads(Path(path).read_text())
    scenario, violations = validate_scenario_dict(doc)
    if scenario is None:
        raise ScenarioError(violations)
    return scenario


# --- harness ----------------------------------------------------------------------------


def build(scenario: Scenario) -> Harness:
    """Wire a scenario into a runnable simulation."""
    trace = EventTrace()
    trace.record(0, "harness", "start", seed=scenario.config.seed,
                 version=scenario.world.version)
    env = Environment(scenario.world, trace, scenario.config.seed)
    repository = Repository(scenario.world, trace)
    registry = ServiceRegistry()
    store = sgm.SafeguardStore()
    sim = Simulation(env, trace, scenario.config)
    tm = TaskManager(registry, repository, store, scenario.config)
    sim.add_actor(tm)
    sim.add_actor(sgm.SafeguardsActor(store, tm.actor_id))
    provider_actors: dict[str, sv.ProviderActor] = {}
    for provider in scenario.providers:
        actor = sv.ProviderActor(provider, store)
        provider_actors[provider.id] = actor
        sim.add_actor(actor)
        sv.publish(provider, registry, scenario.ontology)
        inject_failure(scenario.failures, actor)
    harness = Harness(scenario, sim, env, repository, registry, store, tm, provider_actors)
    for sg in scenario.safeguards:
        harness.achievability.append(store.add(sg, registry, scenario.ontology))
    for task in scenario.tasks:
        harness.task_txns.append(
            tm.submit_task(task.task, task.submit_tick, task.deadline)
        )
    for idx, tick in scenario.cancellations:
        tm.scheduled_cancels.append((tick, harness.task_txns[idx]))
    sim.exogenous.extend(scenario.events)
    return harness


def run(harness: Harness) -> dict:
    """Run every task to a terminal outcome or the horizon; build the verdict."""
    tm = harness.tm

    def all_done() -> bool:
        return all(tm.txns[txn_id].terminal for txn_id in harness.task_txns) and not [
            r for r in tm.resolutions
        ]

    finished = harness.sim.run_until(all_done)
    verdict_tasks = []
    for txn_id in harness.task_txns:
        txn = tm.txns[txn_id]
        verdict_tasks.append(
            {
                "txn": txn.id,
                "outcome": txn.outcome,
                "ticks": harness.sim.now - txn.created_at,
                "replans": txn.replans,
                "safeguard_activations": txn.safeguard_activations,
                "safeguard_resolutions": txn.safeguard_resolutions,
                "steps": {s: st.value for s, st in sorted(txn.step_states.items())},
            }
        )
    activations = harness.store.activations
    verdict = {
        "tasks": verdict_tasks,
        "horizon_reached": not finished,
        "ticks": harness.sim.now,
        "safeguard_activations": len(activations),
        "safeguard_resolved": sum(
            1 for a in activations if a.resolved not in (None, "unresolvable")
        ),
        "safeguard_unresolvable": sum(1 for a in activations if a.resolved == "unresolvable"),
        "all_completed": all(t["outcome"] == OUTCOME_COMPLETED for t in verdict_tasks),
    }
    return verdict


def run_scenario(path: str | Path) -> tuple[dict, Harness]:
    harness = build(load_scenario(path))
    verdict = run(harness)
    return verdict, harness
