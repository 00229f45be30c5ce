"""Deterministic discrete-event core: scheduler, message bus, environment.

Time is integer ticks. Each tick delivers due messages in (actor id, send
sequence) order, then gives every actor one `on_tick` slot in actor-id order.
All sends have delay 1, so delivery is FIFO per (sender, receiver) pair. The
authoritative map lives in the Environment; Task Managers read only the
Repository copy, which is what makes diagnosis after opaque failures matter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable

from . import formula as fm
from . import ontology as on
from .errors import DisjunctiveEffect, HorizonExceeded, MalformedFormula, UnboundVariable, UnknownObject


@dataclass(frozen=True)
class Config:
    seed: int = 0
    max_ticks: int = 300
    timeout_ticks: int = 10
    response_bound: int = 20
    search_budget: int = 100_000
    arrangement_timeout: int = 5
    commitment_ttl: int = 100
    replan_limit: int = 25


# --- effect application -------------------------------------------------------


def _ground_value(term: fm.Term) -> fm.Value:
    if isinstance(term, fm.ObjectRef):
        return term.object_id
    if isinstance(term, fm.Literal):
        return term.value
    if isinstance(term, fm.Variable):
        raise UnboundVariable(term.name)
    raise MalformedFormula("function applications are not allowed in effects")


def effect_delta(
    ontology: on.Ontology, effect: fm.Formula
) -> tuple[list[on.RelationTuple], list[on.RelationTuple], list[tuple[str, str, fm.Value]]]:
    """Decompose a ground conjunctive effect into tuple adds/removes and
    attribute assignments. Disjunctions are rejected."""
    adds: list[on.RelationTuple] = []
    removes: list[on.RelationTuple] = []
    attr_sets: list[tuple[str, str, fm.Value]] = []
    for atom in fm.conjuncts(effect):
        rel = ontology.relations.get(atom.relation)
        if rel is None:
            raise MalformedFormula(f"unknown relation {atom.relation}")
        values = tuple(_ground_value(a) for a in atom.args)
        if rel.semantics == "computed":
            if not rel.assignable or atom.negated:
                raise MalformedFormula(f"{atom.relation} has no update semantics")
            obj_id, attr_name, value = values
            attr_sets.append((str(obj_id), str(attr_name), value))
        elif atom.negated:
            removes.append((atom.relation, values))
        else:
            adds.append((atom.relation, values))
    return adds, removes, attr_sets


def apply_effect_to_map(world: on.WorldMap, effect: fm.Formula) -> on.WorldMap:
    """Apply a ground conjunctive effect: assert positive atoms, retract negated
    ones, perform attribute assignments. Set semantics, hence idempotent."""
    if isinstance(effect, fm.Or):
        raise DisjunctiveEffect(fm.print_formula(effect))
    adds, removes, attr_sets = effect_delta(world.ontology, effect)
    for relation, values in adds + removes:
        rel = world.ontology.relations[relation]
        for kind, value in zip(rel.argument_kinds, values):
            if kind == "object" and value not in world.objects:
                raise UnknownObject(str(value))
    return world.with_changes(adds, removes, attr_sets)


# --- trace ---------------------------------------------------------------------


class EventTrace:
    """Totally ordered event log; byte-stable when serialized under a fixed seed."""

    def __init__(self):
        self.records: list[dict] = []
        self._seq = 0

    def record(self, tick: int, actor: str, kind: str, **payload) -> dict:
        rec = {"tick": tick, "seq": self._seq, "actor": actor, "kind": kind}
        rec.update(payload)
        self._seq += 1
        self.records.append(rec)
        return rec

    def by_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records]
        return "\n".join(lines) + ("\n" if lines else "")


# --- failure schedule ------------------------------------------------------------

MODE_FAULT_DESCRIBED = "FaultWithDescription"
MODE_SILENT = "SilentFailure"
MODE_PARTIAL = "PartialEffect"


@dataclass(frozen=True)
class FailureEntry:
    provider_id: str
    mode: str
    trigger_tick: int | None = None
    trigger_ordinal: int | None = None  # 1-based job counter on the provider
    fraction: float = 0.5
    silent: bool = False  # PartialEffect only: go silent instead of faulting

    def __post_init__(self):
        if (self.trigger_tick is None) == (self.trigger_ordinal is None):
            raise ValueError("exactly one of trigger_tick/trigger_ordinal required")
        if self.trigger_tick is not None and self.trigger_tick < 0:
            raise ValueError("trigger tick must be non-negative")
        if self.trigger_ordinal is not None and self.trigger_ordinal < 1:
            raise ValueError("trigger ordinal is 1-based")
        if self.mode == MODE_PARTIAL and not 0 < self.fraction < 1:
            raise ValueError("fraction must be in (0, 1)")
        if self.mode not in (MODE_FAULT_DESCRIBED, MODE_SILENT, MODE_PARTIAL):
            raise ValueError(f"unknown failure mode {self.mode}")


@dataclass(frozen=True)
class FailureSchedule:
    entries: tuple[FailureEntry, ...] = ()

    def for_provider(self, provider_id: str) -> list[FailureEntry]:
        return [e for e in self.entries if e.provider_id == provider_id]


# --- environment and repository ----------------------------------------------------


class Environment:
    """Authoritative world state; every mutation is trace-logged with its cause."""

    def __init__(self, world: on.WorldMap, trace: EventTrace, seed: int = 0):
        self.world = world
        self.trace = trace
        self.seed = seed
        self.clock = 0

    def apply_effect(self, effect: fm.Formula, cause: str) -> on.WorldMap:
        before = self.world
        after = apply_effect_to_map(before, effect)
        adds = sorted(map(repr, after.relation_tuples - before.relation_tuples))
        removes = sorted(map(repr, before.relation_tuples - after.relation_tuples))
        self.world = after
        self.trace.record(
            self.clock,
            "env",
            "map_mutation",
            cause=cause,
            version=after.version,
            effect=fm.print_formula(effect),
            added=adds,
            removed=removes,
        )
        return after


class Repository:
    """The Task Manager's map of record: a possibly stale copy of the world,
    refreshed by completion reports, fault descriptions, and situation reports."""

    def __init__(self, world: on.WorldMap, trace: EventTrace):
        self.world = world
        self.trace = trace
        self.staleness: dict[str, int] = {}

    def _touch(self, object_ids: Iterable[str], now: int) -> None:
        for obj_id in object_ids:
            self.staleness[obj_id] = now

    def update_with_effect(self, effect: fm.Formula, now: int, cause: str) -> None:
        self.world = apply_effect_to_map(self.world, effect)
        self._touch(fm.mentioned_object_ids(effect), now)
        self.trace.record(
            now, "repository", "repo_update", cause=cause, version=self.world.version
        )

    def update_with_observations(
        self, observations: Iterable[tuple[fm.Atom, bool]], now: int, cause: str
    ) -> None:
        """Set each observed ground atom to its reported truth value."""
        adds: list[on.RelationTuple] = []
        removes: list[on.RelationTuple] = []
        attr_sets: list[tuple[str, str, fm.Value]] = []
        touched: set[str] = set()
        for atom, truth in observations:
            rel = self.world.ontology.relations.get(atom.relation)
            if rel is None:
                continue
            values = tuple(_ground_value(a) for a in atom.args)
            touched.update(str(v) for v in values if isinstance(v, str))
            if rel.semantics == "computed":
                if rel.assignable and truth:
                    obj_id, attr_name, value = values
                    attr_sets.append((str(obj_id), str(attr_name), value))
                continue
            if truth:
                adds.append((atom.relation, values))
            else:
                removes.append((atom.relation, values))
        self.world = self.world.with_changes(adds, removes, attr_sets)
        self._touch(touched & set(self.world.objects), now)
        self.trace.record(
            now, "repository", "repo_update", cause=cause, version=self.world.version
        )

    def sync_region(
        self,
        region: frozenset[str],
        true_tuples: Iterable[on.RelationTuple],
        now: int,
        cause: str,
    ) -> None:
        """Replace the repository's extensional truth inside a region with the
        reported tuple set (tuples entirely within the region)."""
        reported = set(true_tuples)
        stale = {
            t
            for t in self.world.relation_tuples
            if all(isinstance(v, str) and v in region for v in t[1]) and t not in reported
        }
        self.world = self.world.with_changes(reported, stale, ())
        self._touch(region & set(self.world.objects), now)
        self.trace.record(
            now, "repository", "repo_update", cause=cause, version=self.world.version
        )


# --- actors and scheduler -------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    deliver_at: int
    receiver: str
    sender: str
    seq: int
    payload: object


class Actor:
    """A logical process driven by the scheduler."""

    actor_id: str = ""
    one_message_per_tick = False

    def handle_message(self, msg: Message, sim: "Simulation") -> None:  # pragma: no cover
        raise NotImplementedError

    def on_tick(self, sim: "Simulation") -> None:
        pass


@dataclass(frozen=True)
class ExogenousEvent:
    tick: int
    effect: fm.Formula


class Simulation:
    """Single-source-of-time scheduler over named actors."""

    def __init__(self, env: Environment, trace: EventTrace, config: Config):
        self.env = env
        self.trace = trace
        self.config = config
        self.actors: dict[str, Actor] = {}
        self.inboxes: dict[str, list[Message]] = {}
        self.exogenous: list[ExogenousEvent] = []
        self.now = 0
        self._seq = 0

    def add_actor(self, actor: Actor) -> None:
        if actor.actor_id in self.actors:
            raise ValueError(f"duplicate actor id {actor.actor_id}")
        self.actors[actor.actor_id] = actor
        self.inboxes[actor.actor_id] = []

    def send(self, sender: str, receiver: str, payload: object) -> None:
        if receiver not in self.actors:
            raise ValueError(f"unknown actor {receiver}")
        msg = Message(self.now + 1, receiver, sender, self._seq, payload)
        self._seq += 1
        self.inboxes[receiver].append(msg)

    def tick(self) -> None:
        """Process one tick: exogenous effects, message delivery, actor steps."""
        if self.now >= self.config.max_ticks:
            raise HorizonExceeded(self.config.max_ticks)
        self.env.clock = self.now
        for ev in [e for e in self.exogenous if e.tick == self.now]:
            self.env.apply_effect(ev.effect, cause="exogenous")
        for actor_id in sorted(self.actors):
            inbox = self.inboxes[actor_id]
            due = sorted((m for m in inbox if m.deliver_at <= self.now), key=lambda m: m.seq)
            actor = self.actors[actor_id]
            if actor.one_message_per_tick:
                due = due[:1]
            for msg in due:
                inbox.remove(msg)
                kind = type(msg.payload).__name__
                self.trace.record(
                    self.now,
                    actor_id,
                    "message",
                    sender=msg.sender,
                    msg=kind,
                    detail=_payload_detail(msg.payload),
                )
                actor.handle_message(msg, self)
        for actor_id in sorted(self.actors):
            self.actors[actor_id].on_tick(self)
        self.now += 1

    def run_until(self, done: Callable[[], bool]) -> bool:
        """Tick until the predicate holds; False when the horizon preempts it."""
        while not done():
            try:
                self.tick()
            except HorizonExceeded:
                return False
        return True


def _payload_detail(payload: object) -> dict:
    describe = getattr(payload, "trace_detail", None)
    if callable(describe):
        return describe()
    return {}


# --- module-level operations -----------------------------------------------------------


def apply_effect(env: Environment, effect: fm.Formula, cause: str) -> Environment:
    """Apply a ground conjunctive effect to the authoritative map."""
    env.apply_effect(effect, cause)
    return env


def repository_update(repo: Repository, effect: fm.Formula, now: int, cause: str) -> Repository:
    repo.update_with_effect(effect, now, cause)
    return repo


def inject_failure(schedule: FailureSchedule, provider_actor) -> None:
    """Arm a provider actor with its scheduled failure entries."""
    for entry in schedule.for_provider(provider_actor.provider.id):
        provider_actor.arm_failure(entry)
