"""Forward state-space planner and the arrangement of commitments.

Plans are found by breadth-first search over projected world states: a ground
service type applies when its precondition holds; applying it asserts the
effect's positive atoms and retracts its negated ones. Projected states that
satisfy a registered critical formula are pruned, so returned plans never pass
through evident critical situations. The partial order is recovered post hoc
from causal links plus interference between steps.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

from . import formula as fm
from . import ontology as on
from .errors import ArrangementFailure, SearchBudgetExceeded, Unsolvable
from .registry import ServiceRegistry
from .services import Commitment, Intention, ServiceDescription
from .simenv import apply_effect_to_map

INITIAL = "initial"  # pseudo-producer for conditions true in the initial state


@dataclass(frozen=True)
class PlanStep:
    step_id: str
    service_type: str
    binding: tuple[tuple[str, fm.Value], ...]
    precondition: fm.Formula  # ground
    effect: fm.Formula  # ground

    @property
    def task(self) -> fm.Task:
        return fm.Task(self.precondition, self.effect)

    def region(self) -> frozenset[str]:
        return frozenset(
            fm.mentioned_object_ids(self.precondition) | fm.mentioned_object_ids(self.effect)
        )


@dataclass(frozen=True)
class AbstractPlan:
    """Steps in a valid topological sequence, a DAG over them, and causal links
    (producer step or `initial`, establishing atom, consumer step)."""

    steps: tuple[PlanStep, ...]
    order: frozenset[tuple[str, str]]
    causal_links: frozenset[tuple[str, str, str]]

    @property
    def is_empty(self) -> bool:
        return not self.steps

    def step(self, step_id: str) -> PlanStep:
        for s in self.steps:
            if s.step_id == step_id:
                return s
        raise KeyError(step_id)

    def predecessors(self, step_id: str) -> set[str]:
        return {a for a, b in self.order if b == step_id}

    def describe(self) -> dict:
        return {
            "steps": [
                {
                    "id": s.step_id,
                    "service_type": s.service_type,
                    "binding": dict(s.binding),
                    "precondition": fm.print_formula(s.precondition),
                    "effect": fm.print_formula(s.effect),
                }
                for s in self.steps
            ],
            "order": sorted(self.order),
            "causal_links": sorted(self.causal_links),
        }


@dataclass
class Workflow:
    plan: AbstractPlan
    assignments: dict[str, Commitment] = field(default_factory=dict)
    compensations: dict[str, fm.Task | None] = field(default_factory=dict)


@dataclass(frozen=True)
class _GroundAction:
    service_type: str
    binding: tuple[tuple[str, fm.Value], ...]
    precondition: fm.Formula
    effect: fm.Formula


def project_state(world: on.WorldMap, effect: fm.Formula) -> on.WorldMap:
    """Apply a ground conjunctive step effect to a projected state."""
    return apply_effect_to_map(world, effect)


def _ground_actions(
    descriptions: list[ServiceDescription], world: on.WorldMap
) -> list[_GroundAction]:
    ids = sorted(world.objects)
    actions: list[_GroundAction] = []
    for desc in descriptions:
        names = sorted(
            fm.free_variables(desc.precondition) | fm.free_variables(desc.effect)
        )
        if not names:
            actions.append(
                _GroundAction(desc.type_name, (), desc.precondition, desc.effect)
            )
            continue
        for combo in itertools.product(ids, repeat=len(names)):
            binding = dict(zip(names, combo))
            actions.append(
                _GroundAction(
                    desc.type_name,
                    tuple(sorted(binding.items())),
                    fm.substitute(desc.precondition, binding),
                    fm.substitute(desc.effect, binding),
                )
            )
    return actions


def _critical_in(world: on.WorldMap, safeguards) -> bool:
    if safeguards is None:
        return False
    return bool(safeguards.critical_now(world))


def _goal_disjuncts(effect: fm.Formula) -> list[fm.Formula]:
    if isinstance(effect, fm.Or):
        return list(effect.parts)
    return [effect]


def _search(
    goal: fm.Formula,
    initial: on.WorldMap,
    actions: list[_GroundAction],
    safeguards,
    budget: int,
) -> list[_GroundAction]:
    """BFS over projected states; returns the action sequence (may be empty)."""
    if fm.evaluate(goal, initial):
        return []
    frontier: deque[tuple[on.WorldMap, list[_GroundAction]]] = deque([(initial, [])])
    visited = {initial.signature()}
    generated = 1
    pruned = 0
    while frontier:
        state, path = frontier.popleft()
        for action in actions:
            if not fm.evaluate(action.precondition, state):
                continue
            successor = project_state(state, action.effect)
            sig = successor.signature()
            if sig in visited:
                continue
            visited.add(sig)
            generated += 1
            if generated > budget:
                raise SearchBudgetExceeded(budget)
            if _critical_in(successor, safeguards):
                pruned += 1
                continue
            new_path = path + [action]
            if fm.evaluate(goal, successor):
                return new_path
            frontier.append((successor, new_path))
    raise Unsolvable(
        f"no plan reaches {fm.print_formula(goal)}",
        explored=generated,
        pruned_critical=pruned,
    )


def _atom_keys(formula: fm.Formula, ontology: on.Ontology) -> set[tuple]:
    """State footprint of a formula: extensional atom identities plus the
    (object, attribute) cells computed atoms read or write."""
    keys: set[tuple] = set()
    for atom in fm.atoms_of(formula):
        rel = ontology.relations.get(atom.relation)
        values = tuple(
            a.object_id if isinstance(a, fm.ObjectRef) else getattr(a, "value", repr(a))
            for a in atom.args
        )
        if rel is not None and rel.semantics == "computed":
            keys.add(("attr", values[0], values[1]))
        else:
            keys.add((atom.relation, values))
    return keys


def _establishes(step: PlanStep, literal: fm.Atom) -> bool:
    for effect_atom in fm.conjuncts(step.effect):
        if (
            effect_atom.relation == literal.relation
            and effect_atom.args == literal.args
            and effect_atom.negated == literal.negated
        ):
            return True
    return False


def _build_plan(path: list[_GroundAction], ontology: on.Ontology, start_index: int = 1) -> AbstractPlan:
    steps = tuple(
        PlanStep(f"s{start_index + i}", a.service_type, a.binding, a.precondition, a.effect)
        for i, a in enumerate(path)
    )
    links: set[tuple[str, str, str]] = set()
    order: set[tuple[str, str]] = set()
    for i, step in enumerate(steps):
        try:
            literals = fm.conjuncts(step.precondition)
        except Exception:
            literals = list(fm.atoms_of(step.precondition))
        for literal in literals:
            producer = INITIAL
            for j in range(i - 1, -1, -1):
                if _establishes(steps[j], literal):
                    producer = steps[j].step_id
                    break
            links.add((producer, fm.print_formula(literal), step.step_id))
            if producer != INITIAL:
                order.add((producer, step.step_id))
    # Interference: conservatively order any two steps whose effects touch state
    # the other reads or writes, preserving the search sequence.
    reads = [
        _atom_keys(s.precondition, ontology) for s in steps
    ]
    writes = [_atom_keys(s.effect, ontology) for s in steps]
    for i in range(len(steps)):
        for j in range(i + 1, len(steps)):
            if writes[i] & (reads[j] | writes[j]) or writes[j] & reads[i]:
                order.add((steps[i].step_id, steps[j].step_id))
    return AbstractPlan(steps, frozenset(order), frozenset(links))


def plan(
    task: fm.Task,
    registry: ServiceRegistry,
    initial: on.WorldMap,
    safeguards=None,
    *,
    budget: int = 100_000,
    exclude: frozenset[str] = frozenset(),
    start_index: int = 1,
) -> AbstractPlan:
    """Build an abstract plan achieving the task effect from the initial map.

    Disjunctive effects are split per disjunct, first solvable wins. Raises
    Unsolvable (with a frontier summary) or SearchBudgetExceeded.
    """
    descriptions = registry.physical_service_types(exclude)
    actions = _ground_actions(descriptions, initial)
    last: Unsolvable | None = None
    for goal in _goal_disjuncts(task.effect):
        try:
            path = _search(goal, initial, actions, safeguards, budget)
            return _build_plan(path, initial.ontology, start_index)
        except Unsolvable as exc:
            last = exc
    assert last is not None
    raise last


def replan(
    task: fm.Task,
    current: on.WorldMap,
    excluded: frozenset[str],
    registry: ServiceRegistry,
    safeguards=None,
    *,
    budget: int = 100_000,
    start_index: int = 1,
) -> AbstractPlan:
    """Plan again from the current map, skipping providers that faulted."""
    return plan(
        task,
        registry,
        current,
        safeguards,
        budget=budget,
        exclude=excluded,
        start_index=start_index,
    )


# --- arrangement -----------------------------------------------------------------


def select_commitment(commitments: list[Commitment]) -> Commitment | None:
    """Minimal (cost, realization time, provider id); deterministic tie-break."""
    if not commitments:
        return None
    return min(
        commitments, key=lambda c: (c.agreed_cost, c.agreed_duration, c.provider_id)
    )


def synthesize_compensation(
    ontology: on.Ontology, pre_state: on.WorldMap, effect: fm.Formula
) -> fm.Task | None:
    """The inverse ground task: restore every touched atom to its truth in the
    step's projected pre-state. None when some touched relation is marked
    non-invertible or an assigned attribute had no prior value."""
    literals: list[fm.Atom] = []
    try:
        effect_atoms = fm.conjuncts(effect)
    except Exception:
        return None
    seen: set[tuple] = set()
    for atom in effect_atoms:
        rel = ontology.relations.get(atom.relation)
        if rel is None or not rel.invertible:
            return None
        if rel.semantics == "computed":
            obj_term, attr_term = atom.args[0], atom.args[1]
            if not isinstance(obj_term, fm.ObjectRef) or not isinstance(attr_term, fm.ObjectRef):
                return None
            obj = pre_state.objects.get(obj_term.object_id)
            old = obj.attribute_values.get(attr_term.object_id) if obj else None
            if old is None:
                return None
            restored = fm.Atom(atom.relation, (obj_term, attr_term, fm.Literal(old)))
            key = ("attr", obj_term.object_id, attr_term.object_id)
        else:
            values = []
            for term in atom.args:
                if isinstance(term, fm.ObjectRef):
                    values.append(term.object_id)
                elif isinstance(term, fm.Literal):
                    values.append(term.value)
                else:
                    return None
            held = pre_state.has_tuple(atom.relation, values)
            restored = fm.Atom(atom.relation, atom.args, negated=not held)
            key = (atom.relation, tuple(values))
        if key in seen:
            continue
        seen.add(key)
        literals.append(restored)
    if not literals:
        return None
    body = literals[0] if len(literals) == 1 else fm.And(tuple(literals))
    return fm.Task(fm.TRUE, body)


def step_pre_states(plan_obj: AbstractPlan, initial: on.WorldMap) -> dict[str, on.WorldMap]:
    """Projected state before each step, following the plan's sequence order."""
    out: dict[str, on.WorldMap] = {}
    state = initial
    for step in plan_obj.steps:
        out[step.step_id] = state
        state = project_state(state, step.effect)
    return out


def arrange(
    plan_obj: AbstractPlan,
    registry: ServiceRegistry,
    providers: dict,
    initial: on.WorldMap,
    now: int,
    *,
    exclude: frozenset[str] = frozenset(),
    deadline: int | None = None,
    txn_id: str = "txn",
) -> Workflow:
    """Single-round arrangement: per step, query every discovered candidate for
    a commitment and pick the cheapest; attach inverse-task compensations where
    the effect is invertible. Raises ArrangementFailure naming the first
    unassignable step.

    This is the synchronous form; inside a simulation the Task Manager runs the
    same selection over bus messages.
    """
    workflow = Workflow(plan_obj)
    pre_states = step_pre_states(plan_obj, initial)
    for step in plan_obj.steps:
        intention = Intention(step.task, "tm", txn_id, step.step_id, deadline)
        commitments: list[Commitment] = []
        for entry, _ in registry.discover(step.effect, exclude=exclude):
            actor = providers.get(entry.provider_id)
            if actor is None:
                continue
            answer = actor.handle_intention(intention, initial, now)
            if isinstance(answer, Commitment):
                commitments.append(answer)
        chosen = select_commitment(commitments)
        if chosen is None:
            raise ArrangementFailure(step.step_id)
        workflow.assignments[step.step_id] = chosen
        workflow.compensations[step.step_id] = synthesize_compensation(
            initial.ontology, pre_states[step.step_id], step.effect
        )
    return workflow
