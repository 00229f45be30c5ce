"""Safeguards: critical-formula rules and their detection.

A safeguard maps a critical formula to an ordered list of safe alternatives;
when the critical formula holds under some binding, the system must accomplish
one of the tasks (critical -> safe_i), in listed order. The store detects
activations against the authoritative map every tick; resolution itself runs
as ordinary transactions driven by the Task Manager.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import formula as fm
from . import ontology as on
from . import simenv
from .errors import DuplicateId, MalformedFormula

BindingKey = tuple[tuple[str, fm.Value], ...]


def binding_key(binding: fm.Binding) -> BindingKey:
    return tuple(sorted(binding.items()))


@dataclass(frozen=True)
class Safeguard:
    id: str
    critical: fm.Formula
    safe_alternatives: tuple[fm.Formula, ...]
    scope: frozenset[str] | None = None

    def validate(self, ontology: on.Ontology) -> None:
        fm.validate_formula(self.critical, ontology)
        critical_vars = fm.free_variables(self.critical)
        if not self.safe_alternatives:
            raise MalformedFormula(f"safeguard {self.id}: no safe alternatives")
        for alternative in self.safe_alternatives:
            fm.validate_formula(alternative, ontology)
            extra = fm.free_variables(alternative) - critical_vars
            if extra:
                raise MalformedFormula(
                    f"safeguard {self.id}: safe formula binds {sorted(extra)} "
                    "outside the critical formula's variables"
                )


@dataclass
class SafeguardActivation:
    safeguard_id: str
    binding: fm.Binding
    detected_at: int
    resolved: tuple[int, int] | str | None = None  # (alternative index, tick) | "unresolvable"

    @property
    def key(self) -> tuple[str, BindingKey]:
        return (self.safeguard_id, binding_key(self.binding))

    @property
    def open(self) -> bool:
        return self.resolved is None


@dataclass
class AchievabilityReport:
    """Which safe alternatives currently have a matching service; misses are
    warnings, not rejections (the open system may gain services later)."""

    safeguard_id: str
    achievable: list[bool] = field(default_factory=list)

    @property
    def warnings(self) -> list[int]:
        return [i for i, ok in enumerate(self.achievable) if not ok]


class SafeguardStore:
    def __init__(self):
        self._safeguards: dict[str, Safeguard] = {}
        self.activations: list[SafeguardActivation] = []
        self._open: dict[tuple[str, BindingKey], SafeguardActivation] = {}

    def ordered(self) -> list[Safeguard]:
        return list(self._safeguards.values())

    def get(self, safeguard_id: str) -> Safeguard:
        return self._safeguards[safeguard_id]

    def __len__(self) -> int:
        return len(self._safeguards)

    def add(
        self, sg: Safeguard, registry, ontology: on.Ontology
    ) -> AchievabilityReport:
        """Store a safeguard and report, per safe alternative, whether discovery
        currently finds a service type able to accomplish (critical -> safe_i)."""
        if sg.id in self._safeguards:
            raise DuplicateId(sg.id)
        sg.validate(ontology)
        report = AchievabilityReport(sg.id)
        skolem = {name: f"<{name}>" for name in sorted(fm.free_variables(sg.critical))}
        for alternative in sg.safe_alternatives:
            goal = fm.substitute(alternative, skolem)
            achievable = bool(registry.discover(goal)) if registry is not None else False
            report.achievable.append(achievable)
        self._safeguards[sg.id] = sg
        return report

    # -- detection -----------------------------------------------------------------

    def _bindings(self, sg: Safeguard, world: on.WorldMap) -> list[fm.Binding]:
        out = []
        for binding in fm.satisfying_bindings(sg.critical, world):
            values = frozenset(str(v) for v in binding.values())
            if sg.scope is not None and not values <= sg.scope:
                continue
            out.append(binding)
        return out

    def check(self, world: on.WorldMap, now: int = 0) -> list[SafeguardActivation]:
        """New activations: one per (safeguard, witnessing binding), deduplicated
        against activations still open."""
        fresh: list[SafeguardActivation] = []
        for sg in self.ordered():
            for binding in self._bindings(sg, world):
                key = (sg.id, binding_key(binding))
                if key in self._open:
                    continue
                activation = SafeguardActivation(sg.id, binding, now)
                self.activations.append(activation)
                self._open[key] = activation
                fresh.append(activation)
        return fresh

    def critical_now(self, world: on.WorldMap) -> list[tuple[str, fm.Binding]]:
        """All (safeguard, binding) pairs whose critical formula holds."""
        out = []
        for sg in self.ordered():
            for binding in self._bindings(sg, world):
                out.append((sg.id, binding))
        return out

    def safe_index(self, activation: SafeguardActivation, world: on.WorldMap) -> int | None:
        """First safe alternative (1-based) true under the activation binding."""
        sg = self._safeguards[activation.safeguard_id]
        for i, alternative in enumerate(sg.safe_alternatives, start=1):
            if fm.evaluate(fm.substitute(alternative, activation.binding), world):
                return i
        return None

    def mark_resolved(self, activation: SafeguardActivation, index: int, now: int) -> None:
        if activation.open:
            activation.resolved = (index, now)
            self._open.pop(activation.key, None)

    def mark_unresolvable(self, activation: SafeguardActivation) -> None:
        if activation.open:
            activation.resolved = "unresolvable"
            self._open.pop(activation.key, None)

    def open_activations(self) -> list[SafeguardActivation]:
        return [a for a in self.activations if a.open]


@dataclass(frozen=True)
class SafeguardActivated:
    """Bus notification from the store's actor to the Task Manager."""

    safeguard_id: str
    binding: BindingKey
    detected_at: int

    def trace_detail(self) -> dict:
        return {"safeguard": self.safeguard_id, "binding": dict(self.binding)}


class SafeguardsActor(simenv.Actor):
    """Per-tick privileged check of the authoritative map: detects activations,
    notifies the Task Manager, and closes activations once a safe alternative
    holds."""

    actor_id = "safeguards"

    def __init__(self, store: SafeguardStore, task_manager_id: str = "tm"):
        self.store = store
        self.task_manager_id = task_manager_id

    def handle_message(self, msg: simenv.Message, sim: simenv.Simulation) -> None:
        pass

    def on_tick(self, sim: simenv.Simulation) -> None:
        world = sim.env.world
        for sg_id, binding in self.store.critical_now(world):
            sim.trace.record(
                sim.now,
                self.actor_id,
                "safeguard",
                event="critical_active",
                safeguard=sg_id,
                binding={k: v for k, v in sorted(binding.items())},
            )
        for activation in self.store.check(world, sim.now):
            sim.trace.record(
                sim.now,
                self.actor_id,
                "safeguard",
                event="activated",
                safeguard=activation.safeguard_id,
                binding={k: v for k, v in sorted(activation.binding.items())},
            )
            if self.task_manager_id in sim.actors:
                sim.send(
                    self.actor_id,
                    self.task_manager_id,
                    SafeguardActivated(
                        activation.safeguard_id,
                        binding_key(activation.binding),
                        activation.detected_at,
                    ),
                )
        for activation in self.store.open_activations():
            index = self.store.safe_index(activation, world)
            if index is not None:
                self.store.mark_resolved(activation, index, sim.now)
                sim.trace.record(
                    sim.now,
                    self.actor_id,
                    "safeguard",
                    event="resolved",
                    safeguard=activation.safeguard_id,
                    binding={k: v for k, v in sorted(activation.binding.items())},
                    alternative=index,
                )


def add_safeguard(store: SafeguardStore, sg: Safeguard, registry, ontology) -> AchievabilityReport:
    return store.add(sg, registry, ontology)


def check(store: SafeguardStore, world: on.WorldMap, now: int = 0) -> list[SafeguardActivation]:
    return store.check(world, now)
