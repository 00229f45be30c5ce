"""Service descriptions, providers, and the service-side protocol behavior.

A provider (device or human) offers services described by precondition/effect
formulas plus static attributes (operation range, cost, average realization
time). Its actor answers intentions with commitments or refusals, executes
invoked sub-tasks against the authoritative environment, monitors its range
for critical situations, and realizes injected failure modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

from . import formula as fm
from . import ontology as on
from . import simenv
from .errors import InvalidDescription
from .simenv import FailureEntry, MODE_FAULT_DESCRIBED, MODE_PARTIAL, MODE_SILENT

if TYPE_CHECKING:
    from .safeguards import SafeguardStore


class ServiceKind(str, Enum):
    PHYSICAL = "physical"
    COGNITIVE = "cognitive"
    SOFTWARE = "software"


@dataclass(frozen=True)
class ServiceAttributes:
    """Static service features. A bounded operation range is the set of object
    ids the provider can observe and act on; None means unbounded."""

    cost: float = 1.0
    avg_realization_time: int = 1
    operation_range: frozenset[str] | None = None

    def covers(self, region: frozenset[str]) -> bool:
        return self.operation_range is None or region <= self.operation_range


@dataclass(frozen=True)
class ServiceDescription:
    type_name: str
    kind: ServiceKind
    precondition: fm.Formula
    effect: fm.Formula
    inputs: tuple[tuple[str, str], ...] = ()  # (name, semantic type)
    outputs: tuple[tuple[str, str], ...] = ()
    attributes: ServiceAttributes = ServiceAttributes()

    def validate(self, ontology: on.Ontology) -> None:
        try:
            fm.validate_formula(self.precondition, ontology)
            fm.validate_formula(self.effect, ontology)
            if self.kind == ServiceKind.PHYSICAL:
                fm.validate_effect(self.effect, ontology)
        except Exception as exc:
            raise InvalidDescription(f"{self.type_name}: {exc}") from exc
        if self.kind == ServiceKind.PHYSICAL and isinstance(self.effect, fm.TrueFormula):
            raise InvalidDescription(f"{self.type_name}: physical service needs an effect")
        if self.kind != ServiceKind.PHYSICAL and not isinstance(self.effect, fm.TrueFormula):
            raise InvalidDescription(
                f"{self.type_name}: only physical services may change world state"
            )
        input_names = {name for name, _ in self.inputs}
        effect_vars = fm.free_variables(self.effect)
        pre_vars = fm.free_variables(self.precondition)
        if not effect_vars <= pre_vars | input_names:
            loose = ", ".join(sorted(effect_vars - pre_vars - input_names))
            raise InvalidDescription(f"{self.type_name}: unbound effect variables {loose}")
        if self.attributes.cost < 0 or self.attributes.avg_realization_time < 0:
            raise InvalidDescription(f"{self.type_name}: negative cost or time")


@dataclass(frozen=True)
class Provider:
    id: str
    provider_kind: str  # "device" | "human"
    world_object: str
    offered: tuple[ServiceDescription, ...]
    capacity: int = 1
    durations: dict[str, int] = field(default_factory=dict)  # overrides per type

    def duration_for(self, type_name: str) -> int:
        if type_name in self.durations:
            return self.durations[type_name]
        for desc in self.offered:
            if desc.type_name == type_name:
                return max(1, int(desc.attributes.avg_realization_time))
        return 1

    def description(self, type_name: str) -> ServiceDescription | None:
        for desc in self.offered:
            if desc.type_name == type_name:
                return desc
        return None


# --- protocol records ------------------------------------------------------------


@dataclass(frozen=True)
class Intention:
    """Request from a Task Manager: accomplish this (ground) task."""

    task: fm.Task
    requester: str
    txn_id: str
    step_id: str
    deadline: int | None = None
    service_type: str | None = None  # direct addressing, used for cognitive calls

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id}


@dataclass(frozen=True)
class Commitment:
    provider_id: str
    type_name: str
    task: fm.Task  # ground
    agreed_cost: float
    agreed_duration: int
    inputs: tuple[tuple[str, fm.Value], ...]
    expiry: int
    txn_id: str
    step_id: str

    def region(self) -> frozenset[str]:
        return frozenset(
            fm.mentioned_object_ids(self.task.precondition)
            | fm.mentioned_object_ids(self.task.effect)
        )

    def trace_detail(self) -> dict:
        return {
            "txn": self.txn_id,
            "step": self.step_id,
            "provider": self.provider_id,
            "service": self.type_name,
            "cost": self.agreed_cost,
            "duration": self.agreed_duration,
        }


REFUSE_NO_MATCH = "NoMatchingService"
REFUSE_OUT_OF_RANGE = "OutOfRange"
REFUSE_BUSY = "Busy"
REFUSE_EXPIRED = "Expired"


@dataclass(frozen=True)
class Refusal:
    provider_id: str
    reason: str
    txn_id: str
    step_id: str

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id, "reason": self.reason}


@dataclass(frozen=True)
class SituationReport:
    """Observed ground-atom truth values, as produced by a cognitive service."""

    observed: tuple[tuple[fm.Atom, bool], ...]
    at: int
    observer: str
    region: frozenset[str] = frozenset()
    region_tuples: tuple[on.RelationTuple, ...] = ()


# Task Manager -> service messages. All carry (txn, step) routing ids.


@dataclass(frozen=True)
class Invoke:
    txn_id: str
    step_id: str
    commitment: Commitment
    inputs: tuple[tuple[str, fm.Value], ...] = ()
    atoms_of_interest: tuple[fm.Atom, ...] = ()  # cognitive calls
    region: frozenset[str] = frozenset()

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id}


@dataclass(frozen=True)
class Cancel:
    txn_id: str
    step_id: str

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id}


@dataclass(frozen=True)
class Compensate:
    txn_id: str
    step_id: str
    task: fm.Task  # ground restoration task

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id}


# Service -> Task Manager messages.


@dataclass(frozen=True)
class Committed:
    txn_id: str
    step_id: str
    commitment: Commitment

    def trace_detail(self) -> dict:
        return self.commitment.trace_detail()


@dataclass(frozen=True)
class Progress:
    txn_id: str
    step_id: str
    percent: int

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id, "percent": self.percent}


@dataclass(frozen=True)
class Completed:
    txn_id: str
    step_id: str
    confirmation: str = ""  # printed effect formula

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id}


@dataclass(frozen=True)
class Canceled:
    txn_id: str
    step_id: str

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id}


@dataclass(frozen=True)
class Fault:
    """Failure notification; `observations` is empty when the service could not
    describe the resulting situation."""

    txn_id: str
    step_id: str
    observations: tuple[tuple[str, bool], ...] = ()  # (printed atom, truth)

    @property
    def described(self) -> bool:
        return bool(self.observations)

    def trace_detail(self) -> dict:
        return {
            "txn": self.txn_id,
            "step": self.step_id,
            "described": self.described,
        }


@dataclass(frozen=True)
class Compensated:
    txn_id: str
    step_id: str

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id}


@dataclass(frozen=True)
class CompensationFailed:
    txn_id: str
    step_id: str

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id, "step": self.step_id}


@dataclass(frozen=True)
class SituationReportMsg:
    txn_id: str
    step_id: str
    report: SituationReport

    def trace_detail(self) -> dict:
        return {
            "txn": self.txn_id,
            "step": self.step_id,
            "atoms": len(self.report.observed),
        }


@dataclass(frozen=True)
class CriticalSituationNotice:
    safeguard_id: str
    binding: tuple[tuple[str, fm.Value], ...]
    location: tuple[str, ...]
    self_resolving: bool
    reporter: str
    txn_id: str = ""
    step_id: str = ""

    def trace_detail(self) -> dict:
        return {
            "safeguard": self.safeguard_id,
            "binding": dict(self.binding),
            "self_resolving": self.self_resolving,
        }


# --- provider runtime --------------------------------------------------------------


@dataclass
class _Job:
    kind: str  # "execute" | "cognitive" | "software" | "compensate" | "self"
    txn_id: str
    step_id: str
    requester: str
    effect: fm.Formula
    remaining: int
    total: int
    commitment: Commitment | None = None
    atoms_of_interest: tuple[fm.Atom, ...] = ()
    region: frozenset[str] = frozenset()
    failure: FailureEntry | None = None
    started_at: int = 0


def task_region(task: fm.Task) -> frozenset[str]:
    return frozenset(
        fm.mentioned_object_ids(task.precondition) | fm.mentioned_object_ids(task.effect)
    )


class ProviderActor(simenv.Actor):
    """Service Manager plus simulated device/human behind it."""

    one_message_per_tick = True

    def __init__(self, provider: Provider, safeguards: "SafeguardStore | None" = None):
        self.provider = provider
        self.actor_id = provider.id
        self.safeguards = safeguards
        self.jobs: list[_Job] = []
        self.jobs_started = 0
        self.armed: list[FailureEntry] = []
        self.noticed: set[tuple] = set()
        self._preferred_env: fm.Formula | None | bool = False  # False = not parsed yet

    # -- intention handling ----------------------------------------------------

    def arm_failure(self, entry: FailureEntry) -> None:
        self.armed.append(entry)

    def _active_count(self) -> int:
        return len(self.jobs)

    def _preferred_environment(self, world: on.WorldMap) -> fm.Formula | None:
        if self._preferred_env is not False:
            return self._preferred_env  # type: ignore[return-value]
        parsed: fm.Formula | None = None
        body = world.objects.get(self.provider.world_object)
        if body is not None:
            text = body.attribute_values.get("PreferredEnvironment")
            if isinstance(text, str) and text.strip():
                parsed = fm.parse(text)
        self._preferred_env = parsed
        return parsed

    def _environment_acceptable(self, world: on.WorldMap, region: frozenset[str]) -> bool:
        """A human refuses work in regions where its preferred-environment
        condition does not hold."""
        if self.provider.provider_kind != "human":
            return True
        condition = self._preferred_environment(world)
        if condition is None:
            return True
        names = sorted(fm.free_variables(condition))
        if not names:
            return fm.evaluate(condition, world, {})
        var = names[0]
        places = sorted(v for v in region if v in world.objects)
        return all(fm.evaluate(condition, world, {var: place}) for place in places)

    def handle_intention(
        self, intention: Intention, world: on.WorldMap, now: int
    ) -> Commitment | Refusal:
        """Commit iff some offered description matches the task, the task lies in
        range, and capacity is available. Refusal is a normal outcome."""
        def refuse(reason: str) -> Refusal:
            return Refusal(self.provider.id, reason, intention.txn_id, intention.step_id)

        if intention.deadline is not None and now > intention.deadline:
            return refuse(REFUSE_EXPIRED)
        reason = REFUSE_NO_MATCH
        for desc in self.provider.offered:
            if intention.service_type is not None:
                if desc.type_name != intention.service_type:
                    continue
                binding: fm.Binding | None = {}
            else:
                binding = fm.unify_conjunctions(desc.effect, intention.task.effect)
                if binding is None:
                    continue
                binding = _unify_precondition(desc.precondition, intention.task, binding)
                if binding is None:
                    continue
            ground = fm.substitute_task(fm.Task(desc.precondition, desc.effect), binding)
            if intention.service_type is not None:
                ground = intention.task
            region = task_region(ground)
            if not desc.attributes.covers(region):
                reason = REFUSE_OUT_OF_RANGE
                continue
            if not self._environment_acceptable(world, region):
                reason = REFUSE_OUT_OF_RANGE
                continue
            if self._active_count() >= self.provider.capacity:
                return refuse(REFUSE_BUSY)
            expiry = intention.deadline if intention.deadline is not None else now + 100
            inputs = tuple(
                (name, binding[name]) for name, _ in desc.inputs if name in binding
            )
            return Commitment(
                provider_id=self.provider.id,
                type_name=desc.type_name,
                task=ground,
                agreed_cost=desc.attributes.cost,
                agreed_duration=self.provider.duration_for(desc.type_name),
                inputs=inputs,
                expiry=expiry,
                txn_id=intention.txn_id,
                step_id=intention.step_id,
            )
        return refuse(reason)

    # -- message handling --------------------------------------------------------

    def handle_message(self, msg: simenv.Message, sim: simenv.Simulation) -> None:
        payload = msg.payload
        if isinstance(payload, Intention):
            answer = self.handle_intention(payload, sim.env.world, sim.now)
            if isinstance(answer, Commitment):
                sim.send(self.actor_id, msg.sender, Committed(payload.txn_id, payload.step_id, answer))
            else:
                sim.send(self.actor_id, msg.sender, answer)
        elif isinstance(payload, Invoke):
            self._start_invoked_job(payload, msg.sender, sim)
        elif isinstance(payload, Cancel):
            job = self._find_job(payload.txn_id, payload.step_id)
            if job is not None:
                self.jobs.remove(job)
                sim.send(self.actor_id, msg.sender, Canceled(payload.txn_id, payload.step_id))
            # terminal or unknown step: absorb silently, a service never sends
            # after reaching a terminal state
        elif isinstance(payload, Compensate):
            duration = self._compensation_duration()
            self.jobs_started += 1
            self.jobs.append(
                _Job(
                    kind="compensate",
                    txn_id=payload.txn_id,
                    step_id=payload.step_id,
                    requester=msg.sender,
                    effect=payload.task.effect,
                    remaining=duration,
                    total=duration,
                    failure=self._failure_for_ordinal(self.jobs_started),
                    started_at=sim.now,
                )
            )

    def _compensation_duration(self) -> int:
        # Compensation runs on the same machinery; reuse the shortest offered
        # realization time.
        times = [self.provider.duration_for(d.type_name) for d in self.provider.offered]
        return min(times) if times else 1

    def _find_job(self, txn_id: str, step_id: str) -> _Job | None:
        for job in self.jobs:
            if job.txn_id == txn_id and job.step_id == step_id:
                return job
        return None

    def _failure_for_ordinal(self, ordinal: int) -> FailureEntry | None:
        for entry in self.armed:
            if entry.trigger_ordinal == ordinal:
                return entry
        return None

    def _start_invoked_job(self, invoke: Invoke, sender: str, sim: simenv.Simulation) -> None:
        commitment = invoke.commitment
        desc = self.provider.description(commitment.type_name)
        if desc is None:
            sim.send(self.actor_id, sender, Fault(invoke.txn_id, invoke.step_id))
            return
        kind = {
            ServiceKind.PHYSICAL: "execute",
            ServiceKind.COGNITIVE: "cognitive",
            ServiceKind.SOFTWARE: "software",
        }[desc.kind]
        self.jobs_started += 1
        self.jobs.append(
            _Job(
                kind=kind,
                txn_id=invoke.txn_id,
                step_id=invoke.step_id,
                requester=sender,
                effect=commitment.task.effect,
                remaining=commitment.agreed_duration,
                total=commitment.agreed_duration,
                commitment=commitment,
                atoms_of_interest=invoke.atoms_of_interest,
                region=invoke.region or commitment.region(),
                failure=self._failure_for_ordinal(self.jobs_started),
                started_at=sim.now,
            )
        )

    # -- per-tick behavior ----------------------------------------------------------

    def on_tick(self, sim: simenv.Simulation) -> None:
        for job in list(self.jobs):
            entry = job.failure
            fire = entry is not None and (
                entry.trigger_ordinal is not None or entry.trigger_tick == sim.now
            )
            if not fire:
                tick_entry = self._tick_failure(sim.now)
                if tick_entry is not None and job is self._oldest_job():
                    entry, fire = tick_entry, True
            if fire and entry is not None:
                self._realize_failure(job, entry, sim)
                continue
            self._advance_job(job, sim)
        self._monitor_local(sim)

    def _oldest_job(self) -> _Job | None:
        return self.jobs[0] if self.jobs else None

    def _tick_failure(self, now: int) -> FailureEntry | None:
        for entry in self.armed:
            if entry.trigger_tick == now:
                return entry
        return None

    def _advance_job(self, job: _Job, sim: simenv.Simulation) -> None:
        job.remaining -= 1
        if job.remaining > 0:
            percent = int(100 * (job.total - job.remaining) / job.total)
            sim.send(self.actor_id, job.requester, Progress(job.txn_id, job.step_id, percent))
            return
        self.jobs.remove(job)
        if job.kind == "execute":
            sim.env.apply_effect(job.effect, cause=f"{job.txn_id}/{job.step_id}")
            sim.send(
                self.actor_id,
                job.requester,
                Completed(job.txn_id, job.step_id, fm.print_formula(job.effect)),
            )
        elif job.kind == "cognitive":
            report = self._observe(job, sim)
            sim.send(
                self.actor_id, job.requester, SituationReportMsg(job.txn_id, job.step_id, report)
            )
            sim.send(self.actor_id, job.requester, Completed(job.txn_id, job.step_id))
        elif job.kind == "software":
            sim.send(self.actor_id, job.requester, Completed(job.txn_id, job.step_id))
        elif job.kind == "compensate":
            sim.env.apply_effect(job.effect, cause=f"{job.txn_id}/{job.step_id}/compensation")
            sim.send(self.actor_id, job.requester, Compensated(job.txn_id, job.step_id))
        elif job.kind == "self":
            sim.env.apply_effect(job.effect, cause=f"{self.actor_id}/self-resolution")
            sim.trace.record(
                sim.now,
                self.actor_id,
                "provider",
                event="self_resolved",
                effect=fm.print_formula(job.effect),
            )
            if job.requester:
                observed = tuple(
                    (positive, fm.evaluate(positive, sim.env.world))
                    for atom in fm.conjuncts(job.effect)
                    for positive in [fm.Atom(atom.relation, atom.args)]
                )
                report = SituationReport(observed, sim.now, self.actor_id)
                sim.send(
                    self.actor_id, job.requester, SituationReportMsg(job.txn_id, job.step_id, report)
                )

    def _observe(self, job: _Job, sim: simenv.Simulation) -> SituationReport:
        """Ground truth restricted to the observed region: requested atoms get
        explicit truth values; all true tuples inside the region are listed."""
        world = sim.env.world
        observed = []
        for atom in job.atoms_of_interest:
            positive = fm.Atom(atom.relation, atom.args)
            observed.append((positive, fm.evaluate(positive, world)))
        region = job.region
        region_tuples = tuple(
            sorted(
                (
                    t
                    for t in world.relation_tuples
                    if all(isinstance(v, str) and v in region for v in t[1])
                ),
                key=repr,
            )
        )
        return SituationReport(tuple(observed), sim.now, self.actor_id, region, region_tuples)

    def _realize_failure(self, job: _Job, entry: FailureEntry, sim: simenv.Simulation) -> None:
        self.jobs.remove(job)
        if job.kind == "compensate":
            if entry.mode != MODE_SILENT:
                sim.send(
                    self.actor_id, job.requester, CompensationFailed(job.txn_id, job.step_id)
                )
            return
        if entry.mode == MODE_SILENT:
            sim.trace.record(
                sim.now, self.actor_id, "provider", event="silent_failure",
                txn=job.txn_id, step=job.step_id,
            )
            return
        if entry.mode == MODE_PARTIAL:
            positives = [
                a for a in fm.conjuncts(job.effect)
                if not a.negated
                and sim.env.world.ontology.relations[a.relation].semantics == "extensional"
            ]
            positives.sort(key=lambda a: fm.print_formula(a))
            count = max(1, math.floor(entry.fraction * len(positives))) if positives else 0
            if count:
                subset = fm.And(tuple(positives[:count])) if count > 1 else positives[0]
                sim.env.apply_effect(subset, cause=f"{job.txn_id}/{job.step_id}/partial")
            if entry.silent:
                sim.trace.record(
                    sim.now, self.actor_id, "provider", event="silent_failure",
                    txn=job.txn_id, step=job.step_id,
                )
                return
            sim.send(self.actor_id, job.requester, Fault(job.txn_id, job.step_id))
            return
        assert entry.mode == MODE_FAULT_DESCRIBED
        # Report the actual truth of every effect atom after the failure.
        observations = tuple(
            (fm.print_formula(positive), fm.evaluate(positive, sim.env.world))
            for atom in fm.conjuncts(job.effect)
            for positive in [fm.Atom(atom.relation, atom.args)]
        )
        sim.send(self.actor_id, job.requester, Fault(job.txn_id, job.step_id, observations))

    # -- local monitoring -------------------------------------------------------------

    def _monitor_local(self, sim: simenv.Simulation) -> None:
        """During execution, watch the operation range for critical situations
        and report them; self-resolve when an offered service reaches a safe
        alternative."""
        if self.safeguards is None:
            return
        executing = [j for j in self.jobs if j.kind == "execute"]
        if not executing:
            return
        job = executing[0]
        rng = None
        if job.commitment is not None:
            desc = self.provider.description(job.commitment.type_name)
            if desc is not None:
                rng = desc.attributes.operation_range
        world = sim.env.world
        for sg in self.safeguards.ordered():
            for binding in fm.satisfying_bindings(sg.critical, world):
                values = frozenset(str(v) for v in binding.values())
                if sg.scope is not None and not values <= sg.scope:
                    continue
                if rng is not None and not values <= rng:
                    continue
                key = (sg.id, tuple(sorted(binding.items())))
                if key in self.noticed:
                    continue
                self.noticed.add(key)
                self_task = self._self_resolution(sg, binding)
                notice = CriticalSituationNotice(
                    safeguard_id=sg.id,
                    binding=tuple(sorted(binding.items())),
                    location=tuple(sorted(values)),
                    self_resolving=self_task is not None,
                    reporter=self.actor_id,
                    txn_id=job.txn_id,
                    step_id=job.step_id,
                )
                sim.send(self.actor_id, job.requester, notice)
                if self_task is not None:
                    self.jobs_started += 1
                    self.jobs.append(
                        _Job(
                            kind="self",
                            txn_id=job.txn_id,
                            step_id=job.step_id,
                            requester=job.requester,
                            effect=self_task.effect,
                            remaining=1,
                            total=1,
                            failure=self._failure_for_ordinal(self.jobs_started),
                            started_at=sim.now,
                        )
                    )

    def _self_resolution(self, sg, binding: fm.Binding) -> fm.Task | None:
        for alternative in sg.safe_alternatives:
            target = fm.substitute(alternative, binding)
            for desc in self.provider.offered:
                if desc.kind != ServiceKind.PHYSICAL:
                    continue
                unifier = fm.unify_conjunctions(desc.effect, target)
                if unifier is not None:
                    return fm.Task(fm.TRUE, target)
        return None


def _unify_precondition(
    pattern: fm.Formula, task: fm.Task, binding: fm.Binding
) -> fm.Binding | None:
    """Extend the effect unifier over the precondition; tolerate a trivial task
    precondition only when the pattern is fully bound by the effect match."""
    bound = fm.substitute(pattern, binding)
    if isinstance(task.precondition, fm.TrueFormula):
        return binding if not fm.free_variables(bound) else None
    try:
        pattern_atoms = fm.conjuncts(bound)
        target_atoms = fm.conjuncts(task.precondition)
    except Exception:
        return binding if bound == task.precondition else None
    if len(pattern_atoms) != len(target_atoms):
        return None
    out: fm.Binding | None = dict(binding)
    for p, t in zip(pattern_atoms, target_atoms):
        out = fm.unify_atom(p, t, out)  # type: ignore[arg-type]
        if out is None:
            return None
    return out


def publish(provider: Provider, registry, ontology: on.Ontology, now: int = 0):
    """Validate and register all of a provider's descriptions; idempotent."""
    for desc in provider.offered:
        desc.validate(ontology)
    acks = []
    for desc in provider.offered:
        acks.append(registry.register(provider.id, desc, now))
    return acks
