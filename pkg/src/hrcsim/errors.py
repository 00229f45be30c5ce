"""Exception hierarchy shared by all kernel modules."""

from __future__ import annotations


class HrcError(Exception):
    """Base class for every error raised by this package."""


# --- ontology ---------------------------------------------------------------


class OntologyError(HrcError):
    pass


class UnknownParent(OntologyError):
    pass


class DuplicateName(OntologyError):
    pass


class RangeNotSubsetOfParent(OntologyError):
    pass


class UnresolvedSubobjectType(OntologyError):
    pass


class InvalidTypeDefinition(OntologyError):
    pass


class UnknownAttribute(OntologyError):
    pass


class UnknownType(OntologyError):
    pass


class UnknownObject(OntologyError):
    pass


# --- formula ----------------------------------------------------------------


class FormulaError(HrcError):
    pass


class FormulaSyntaxError(FormulaError):
    """Raised on malformed concrete syntax; carries the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownRelation(FormulaError):
    pass


class UnknownFunction(FormulaError):
    pass


class ArityMismatch(FormulaError):
    pass


class MalformedFormula(FormulaError):
    pass


class UnboundVariable(FormulaError):
    pass


class DomainTooLarge(FormulaError):
    pass


class DisjunctiveEffect(FormulaError):
    """An effect position received a disjunction, which has no update semantics."""


# --- services / registry ----------------------------------------------------


class InvalidDescription(HrcError):
    pass


class UnknownId(HrcError):
    pass


class DuplicateId(HrcError):
    pass


class UnknownProvider(HrcError):
    pass


# --- planner ----------------------------------------------------------------


class PlanningError(HrcError):
    pass


class Unsolvable(PlanningError):
    """No plan reaches the goal; carries a summary of the exhausted search."""

    def __init__(self, message: str, explored: int = 0, pruned_critical: int = 0):
        super().__init__(message)
        self.explored = explored
        self.pruned_critical = pruned_critical


class SearchBudgetExceeded(PlanningError):
    def __init__(self, budget: int):
        super().__init__(f"search budget of {budget} nodes exceeded")
        self.budget = budget


class ArrangementFailure(PlanningError):
    """No provider committed to a plan step; names the step."""

    def __init__(self, step_id: str, reason: str = "no commitment"):
        super().__init__(f"step {step_id}: {reason}")
        self.step_id = step_id


# --- transactions -----------------------------------------------------------


class ProtocolViolation(HrcError):
    """A (state, message) pair outside the step transition table."""

    def __init__(self, state: str, event: str):
        super().__init__(f"event {event!r} not accepted in state {state!r}")
        self.state = state
        self.event = event


class UnknownTransaction(HrcError):
    pass


class AlreadyTerminal(HrcError):
    pass


# --- simulation -------------------------------------------------------------


class HorizonExceeded(HrcError):
    def __init__(self, max_ticks: int):
        super().__init__(f"simulation horizon of {max_ticks} ticks reached")
        self.max_ticks = max_ticks


# --- scenario files ----------------------------------------------------------


class ScenarioError(HrcError):
    """Scenario document failed validation; carries located violations."""

    def __init__(self, violations: list[tuple[str, str]]):
        lines = "; ".join(f"{loc}: {msg}" for loc, msg in violations)
        super().__init__(lines or "invalid scenario")
        self.violations = violations
