"""Failure Recovery Protocol: per-step state machine and the Task Manager.

A transaction realizes one task. Steps move through the transition table below;
on a fault the Task Manager diagnoses the resulting situation (via the fault
description or a cognitive service), compensates the step where possible,
replans from the current repository map excluding the faulted provider, and
continues. Critical-situation notices interrupt execution: in-region steps are
canceled and the matching safeguard's safe alternatives are attempted, in
order, as nested transactions. Every transaction ends in exactly one of
Completed, Unable, or Canceled.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from . import formula as fm
from . import planner as pl
from . import services as sv
from .errors import (
    AlreadyTerminal,
    PlanningError,
    ProtocolViolation,
    UnknownTransaction,
)
from .registry import ServiceRegistry
from .safeguards import SafeguardActivated, SafeguardStore, binding_key
from .simenv import Config, Message, Repository, Simulation, Actor

logger = logging.getLogger(__name__)


class StepState(str, Enum):
    ARRANGED = "Arranged"
    INVOKED = "Invoked"
    ACTIVE = "Active"
    COMPLETING = "Completing"
    COMPLETED = "Completed"
    CANCELING = "Canceling"
    CANCELED = "Canceled"
    FAULTED = "Faulted"
    COMPENSATING = "Compensating"
    COMPENSATED = "Compensated"
    COMPENSATION_FAILED = "CompensationFailed"
    ABANDONED = "Abandoned"


TERMINAL_STATES = {
    StepState.COMPLETED,
    StepState.CANCELED,
    StepState.COMPENSATED,
    StepState.COMPENSATION_FAILED,
    StepState.ABANDONED,
    StepState.FAULTED,
}

WAITING_STATES = {
    StepState.INVOKED,
    StepState.ACTIVE,
    StepState.CANCELING,
    StepState.COMPLETING,
    StepState.COMPENSATING,
}

# Events: protocol messages plus Task Manager commands.
EVT_INVOKE = "Invoke"
EVT_PROGRESS = "Progress"
EVT_COMPLETED = "Completed"
EVT_ACK = "Ack"
EVT_FAULT = "Fault"
EVT_CANCEL = "Cancel"
EVT_CANCELED = "Canceled"
EVT_COMPENSATE = "Compensate"
EVT_COMPENSATED = "Compensated"
EVT_COMPENSATION_FAILED = "CompensationFailed"
EVT_SILENCE = "SilenceTimeout"
EVT_ABORT = "Abort"

_TABLE: dict[tuple[StepState, str], StepState] = {
    (StepState.ARRANGED, EVT_INVOKE): StepState.INVOKED,
    (StepState.INVOKED, EVT_PROGRESS): StepState.ACTIVE,
    (StepState.ACTIVE, EVT_PROGRESS): StepState.ACTIVE,
    (StepState.INVOKED, EVT_COMPLETED): StepState.COMPLETING,
    (StepState.ACTIVE, EVT_COMPLETED): StepState.COMPLETING,
    (StepState.COMPLETING, EVT_ACK): StepState.COMPLETED,
    (StepState.INVOKED, EVT_FAULT): StepState.FAULTED,
    (StepState.ACTIVE, EVT_FAULT): StepState.FAULTED,
    (StepState.INVOKED, EVT_SILENCE): StepState.FAULTED,
    (StepState.ACTIVE, EVT_SILENCE): StepState.FAULTED,
    (StepState.INVOKED, EVT_CANCEL): StepState.CANCELING,
    (StepState.ACTIVE, EVT_CANCEL): StepState.CANCELING,
    (StepState.CANCELING, EVT_CANCELED): StepState.CANCELED,
    # In-flight messages crossing a Cancel are tolerated rather than faulted.
    (StepState.CANCELING, EVT_PROGRESS): StepState.CANCELING,
    (StepState.CANCELING, EVT_COMPLETED): StepState.COMPLETING,
    (StepState.CANCELING, EVT_FAULT): StepState.CANCELED,
    (StepState.CANCELING, EVT_SILENCE): StepState.CANCELED,
    (StepState.FAULTED, EVT_COMPENSATE): StepState.COMPENSATING,
    (StepState.COMPLETED, EVT_COMPENSATE): StepState.COMPENSATING,
    (StepState.COMPENSATING, EVT_PROGRESS): StepState.COMPENSATING,
    (StepState.COMPENSATING, EVT_COMPENSATED): StepState.COMPENSATED,
    (StepState.COMPENSATING, EVT_COMPENSATION_FAILED): StepState.COMPENSATION_FAILED,
    (StepState.COMPENSATING, EVT_SILENCE): StepState.COMPENSATION_FAILED,
}


def transition(state: StepState, event: str) -> StepState:
    """The step transition table; every pair outside it is a protocol violation."""
    if event == EVT_ABORT:
        if state in TERMINAL_STATES:
            raise ProtocolViolation(state.value, event)
        return StepState.ABANDONED
    try:
        return _TABLE[(state, event)]
    except KeyError:
        raise ProtocolViolation(state.value if state else "?", event) from None


OUTCOME_COMPLETED = "Completed"
OUTCOME_UNABLE = "Unable"
OUTCOME_CANCELED = "Canceled"


# --- Task-Manager-directed control messages -----------------------------------------


@dataclass(frozen=True)
class CancelCommand:
    txn_id: str

    def trace_detail(self) -> dict:
        return {"txn": self.txn_id}


# --- transaction runtime ---------------------------------------------------------------


@dataclass
class _Round:
    step_id: str
    awaiting: set[str]
    commitments: list[sv.Commitment]
    deadline: int


@dataclass
class _ArrangeJob:
    plan: pl.AbstractPlan
    pending: list[str]
    pre_states: dict
    purpose: str  # "initial" | "recover" | "reassign"
    round: _Round | None = None
    keep_compensations: bool = False


@dataclass
class _Diag:
    step_id: str
    region: frozenset[str]
    atoms: tuple[fm.Atom, ...]
    worst_case: tuple[tuple[fm.Atom, bool], ...]
    candidates: list
    index: int = 0
    stage: str = "intending"  # "intending" | "executing"
    deadline: int = 0
    commitment: sv.Commitment | None = None
    report_merged: bool = False


@dataclass
class _RecoveryItem:
    kind: str  # "fault" | "verify" | "safeguard"
    step_id: str | None = None
    observations: tuple[tuple[str, bool], ...] = ()
    described: bool = False
    safeguard_id: str | None = None
    binding: tuple = ()


@dataclass
class _Recovery:
    item: _RecoveryItem
    stage: str
    diag: _Diag | None = None
    comp_step: str | None = None
    alt_index: int = 0
    child_txn: str | None = None


@dataclass
class _Winddown:
    target: str
    stage: str = "canceling"  # "canceling" | "compensating"
    comp_step: str | None = None
    attempted: set[str] = field(default_factory=set)


class Transaction:
    """One task realization: records plus orchestration state."""

    def __init__(self, txn_id: str, task: fm.Task, purpose: str, parent: str | None,
                 deadline: int | None, created_at: int):
        self.id = txn_id
        self.task = task
        self.purpose = purpose  # "task" | "resolution"
        self.parent = parent
        self.deadline = deadline
        self.created_at = created_at
        self.phase = "queued"  # queued|planning|arranging|executing|winddown|done
        self.outcome: str | None = None
        self.excluded_providers: set[str] = set()
        self.step_states: dict[str, StepState] = {}
        self.events: list[dict] = []
        self.replans = 0
        self.step_counter = 0
        self.diag_counter = 0
        self.active_plan: pl.AbstractPlan | None = None
        self.workflow = pl.Workflow(pl.AbstractPlan((), frozenset(), frozenset()))
        self.arrange: _ArrangeJob | None = None
        self.recovery: _Recovery | None = None
        self.recovery_queue: deque[_RecoveryItem] = deque()
        self.winddown: _Winddown | None = None
        self.cancel_requested = False
        self.completed_order: list[str] = []
        self.last_msg: dict[str, int] = {}
        self.safeguard_activations = 0
        self.safeguard_resolutions = 0

    @property
    def terminal(self) -> bool:
        return self.outcome is not None

    def steps_in(self, states: set[StepState]) -> list[str]:
        return sorted(s for s, st in self.step_states.items() if st in states)

    def provider_of(self, step_id: str) -> str | None:
        commitment = self.workflow.assignments.get(step_id)
        return commitment.provider_id if commitment else None

    def snapshot(self) -> dict:
        return {
            "id": self.id,
            "purpose": self.purpose,
            "outcome": self.outcome,
            "replans": self.replans,
            "steps": {s: st.value for s, st in sorted(self.step_states.items())},
            "excluded": sorted(self.excluded_providers),
            "safeguard_activations": self.safeguard_activations,
            "safeguard_resolutions": self.safeguard_resolutions,
        }


@dataclass
class _Resolution:
    """Sequential attempt of a safeguard's safe alternatives as nested tasks."""

    safeguard_id: str
    binding: fm.Binding
    alternatives: tuple[fm.Formula, ...]
    critical: fm.Formula
    parent_txn: str | None
    index: int = 0
    child_txn: str | None = None


class TaskManager(Actor):
    """Single Task Manager actor: plans on the repository map, arranges
    commitments over the bus, executes workflows under the FRP, and drives
    safeguard resolutions."""

    def __init__(
        self,
        registry: ServiceRegistry,
        repository: Repository,
        store: SafeguardStore | None,
        config: Config,
        actor_id: str = "tm",
    ):
        self.actor_id = actor_id
        self.registry = registry
        self.repository = repository
        self.store = store
        self.config = config
        self.txns: dict[str, Transaction] = {}
        self.txn_order: list[str] = []
        self.root_queue: deque[str] = deque()
        self.current_root: str | None = None
        self.scheduled: list[tuple[int, str]] = []  # (submit tick, txn id)
        self.scheduled_cancels: list[tuple[int, str]] = []
        self._counter = 0
        self.handled_safeguards: dict[tuple, str] = {}
        self.resolutions: list[_Resolution] = []

    # -- public API -------------------------------------------------------------------

    def submit_task(
        self,
        task: fm.Task,
        submit_tick: int = 0,
        deadline: int | None = None,
        purpose: str = "task",
        parent: str | None = None,
    ) -> str:
        self._counter += 1
        txn = Transaction(f"t{self._counter}", task, purpose, parent, deadline, submit_tick)
        self.txns[txn.id] = txn
        self.txn_order.append(txn.id)
        self.scheduled.append((submit_tick, txn.id))
        return txn.id

    def cancel_transaction(self, txn_id: str, sim: Simulation) -> None:
        txn = self.txns.get(txn_id)
        if txn is None:
            raise UnknownTransaction(txn_id)
        if txn.terminal:
            raise AlreadyTerminal(txn_id)
        self._trace(sim, txn, "txn", event="cancel_requested")
        if txn.phase == "queued":
            self.scheduled = [(t, i) for t, i in self.scheduled if i != txn_id]
            self._finish(txn, OUTCOME_CANCELED, sim)
            return
        txn.cancel_requested = True
        self._advance(txn, sim)

    # -- trace helpers ----------------------------------------------------------------

    def _trace(self, sim: Simulation, txn: Transaction | None, kind: str, **payload) -> None:
        rec = sim.trace.record(
            sim.now, self.actor_id, kind, **({"txn": txn.id} if txn else {}), **payload
        )
        if txn is not None:
            txn.events.append(rec)

    def _apply_event(
        self, sim: Simulation, txn: Transaction, step_id: str, event: str, note: str = ""
    ) -> StepState | None:
        """Run one step transition; protocol violations are logged, the message
        is discarded, and a non-terminal step is marked Faulted."""
        state = txn.step_states.get(step_id)
        if state is None:
            self._trace(sim, txn, "protocol_violation", step=step_id, event=event,
                        state="<unknown step>")
            return None
        try:
            new_state = transition(state, event)
        except ProtocolViolation:
            logger.warning("protocol violation: %s in state %s", event, state.value)
            self._trace(sim, txn, "protocol_violation", step=step_id, event=event,
                        state=state.value)
            if state not in TERMINAL_STATES:
                txn.step_states[step_id] = StepState.FAULTED
                self._trace(sim, txn, "step_transition", step=step_id, event=event,
                            before=state.value, after=StepState.FAULTED.value)
            return None
        txn.step_states[step_id] = new_state
        payload = {"step": step_id, "event": event, "before": state.value,
                   "after": new_state.value}
        if note:
            payload["note"] = note
        self._trace(sim, txn, "step_transition", **payload)
        return new_state

    # -- message handling --------------------------------------------------------------

    def handle_message(self, msg: Message, sim: Simulation) -> None:
        payload = msg.payload
        if isinstance(payload, CancelCommand):
            txn = self.txns.get(payload.txn_id)
            if txn is not None and not txn.terminal:
                self.cancel_transaction(payload.txn_id, sim)
            return
        if isinstance(payload, SafeguardActivated):
            self._on_safeguard(payload.safeguard_id, dict(payload.binding), sim)
            return
        if isinstance(payload, sv.CriticalSituationNotice):
            key = (payload.safeguard_id, payload.binding)
            if payload.self_resolving:
                self.handled_safeguards.setdefault(key, "self")
                self._trace(sim, None, "safeguard", event="self_resolving_notice",
                            safeguard=payload.safeguard_id, reporter=payload.reporter)
                return
            self._on_safeguard(payload.safeguard_id, dict(payload.binding), sim)
            return
        txn_id = getattr(payload, "txn_id", None)
        txn = self.txns.get(txn_id) if txn_id else None
        if txn is None:
            return
        step_id = getattr(payload, "step_id", "")
        if step_id:
            txn.last_msg[step_id] = sim.now
        if self._route_diag(txn, payload, sim):
            return
        if isinstance(payload, sv.Committed):
            self._on_committed(txn, payload.commitment, sim)
        elif isinstance(payload, sv.Refusal):
            self._on_refusal(txn, payload, sim)
        elif isinstance(payload, sv.Progress):
            self._apply_event(sim, txn, step_id, EVT_PROGRESS)
        elif isinstance(payload, sv.Completed):
            self._on_completed(txn, step_id, sim)
        elif isinstance(payload, sv.Canceled):
            self._apply_event(sim, txn, step_id, EVT_CANCELED)
            self._advance(txn, sim)
        elif isinstance(payload, sv.Fault):
            self._on_fault(txn, step_id, payload, sim)
        elif isinstance(payload, sv.Compensated):
            self._apply_event(sim, txn, step_id, EVT_COMPENSATED)
            self._advance(txn, sim)
        elif isinstance(payload, sv.CompensationFailed):
            self._apply_event(sim, txn, step_id, EVT_COMPENSATION_FAILED)
            self._trace(sim, txn, "txn", event="compensation_failed", step=step_id)
            self._advance(txn, sim)
        elif isinstance(payload, sv.SituationReportMsg):
            self._merge_report(payload.report, sim, cause=f"{txn.id}/{step_id}/report")

    def _on_completed(self, txn: Transaction, step_id: str, sim: Simulation) -> None:
        state = self._apply_event(sim, txn, step_id, EVT_COMPLETED)
        if state is not StepState.COMPLETING:
            return
        self._apply_event(sim, txn, step_id, EVT_ACK)
        if step_id not in txn.completed_order:
            txn.completed_order.append(step_id)
        commitment = txn.workflow.assignments.get(step_id)
        if commitment is not None and not isinstance(commitment.task.effect, fm.TrueFormula):
            # Completion doubles as the provider's report of its own effect.
            self.repository.update_with_effect(
                commitment.task.effect, sim.now, cause=f"{txn.id}/{step_id}/completed"
            )
        self._advance(txn, sim)

    def _on_fault(self, txn: Transaction, step_id: str, fault: sv.Fault, sim: Simulation) -> None:
        state = self._apply_event(sim, txn, step_id, EVT_FAULT)
        if state is StepState.FAULTED:
            provider = txn.provider_of(step_id)
            if provider:
                txn.excluded_providers.add(provider)
            txn.recovery_queue.append(
                _RecoveryItem("fault", step_id, fault.observations, fault.described)
            )
            self._trace(sim, txn, "txn", event="fault_detected", step=step_id,
                        described=fault.described)
        self._advance(txn, sim)

    # -- arrangement -------------------------------------------------------------------

    def _start_arrange(self, txn: Transaction, plan: pl.AbstractPlan, purpose: str,
                       sim: Simulation, keep_compensations: bool = False) -> None:
        pre_states = pl.step_pre_states(plan, self.repository.world)
        txn.arrange = _ArrangeJob(
            plan, [s.step_id for s in plan.steps], pre_states, purpose,
            keep_compensations=keep_compensations,
        )
        txn.phase = "arranging"
        self._advance_arrange(txn, sim)

    def _advance_arrange(self, txn: Transaction, sim: Simulation) -> None:
        job = txn.arrange
        if job is None:
            return
        if txn.cancel_requested:
            self._begin_winddown(txn, OUTCOME_CANCELED, sim)
            return
        if job.round is not None:
            rnd = job.round
            if rnd.awaiting and sim.now < rnd.deadline:
                return
            self._close_round(txn, job, sim)
            if txn.arrange is not job or job.round is not None:
                return
        while job.pending and job.round is None:
            step_id = job.pending[0]
            step = job.plan.step(step_id)
            candidates: list[str] = []
            for entry, _ in self.registry.discover(step.effect, exclude=frozenset(txn.excluded_providers)):
                if entry.provider_id not in candidates:
                    candidates.append(entry.provider_id)
            if not candidates:
                self._arrange_failed(txn, step_id, sim)
                return
            intention = sv.Intention(step.task, self.actor_id, txn.id, step_id, txn.deadline)
            for provider_id in candidates:
                sim.send(self.actor_id, provider_id, intention)
                self._trace(sim, txn, "arrangement", event="intention_sent",
                            step=step_id, provider=provider_id)
            job.round = _Round(step_id, set(candidates), [],
                               sim.now + self.config.arrangement_timeout)
            return
        if not job.pending:
            self._finish_arrange(txn, sim)

    def _on_committed(self, txn: Transaction, commitment: sv.Commitment, sim: Simulation) -> None:
        job = txn.arrange
        if job is None or job.round is None or job.round.step_id != commitment.step_id:
            return
        job.round.commitments.append(commitment)
        job.round.awaiting.discard(commitment.provider_id)
        self._trace(sim, txn, "arrangement", event="commitment_received",
                    step=commitment.step_id, provider=commitment.provider_id,
                    cost=commitment.agreed_cost)
        self._advance_arrange(txn, sim)

    def _on_refusal(self, txn: Transaction, refusal: sv.Refusal, sim: Simulation) -> None:
        job = txn.arrange
        if job is None or job.round is None or job.round.step_id != refusal.step_id:
            return
        job.round.awaiting.discard(refusal.provider_id)
        self._trace(sim, txn, "arrangement", event="refusal_received",
                    step=refusal.step_id, provider=refusal.provider_id,
                    reason=refusal.reason)
        self._advance_arrange(txn, sim)

    def _close_round(self, txn: Transaction, job: _ArrangeJob, sim: Simulation) -> None:
        rnd = job.round
        assert rnd is not None
        job.round = None
        chosen = pl.select_commitment(rnd.commitments)
        if chosen is None:
            self._arrange_failed(txn, rnd.step_id, sim)
            return
        txn.workflow.assignments[rnd.step_id] = chosen
        if not (job.keep_compensations and rnd.step_id in txn.workflow.compensations):
            txn.workflow.compensations[rnd.step_id] = pl.synthesize_compensation(
                self.repository.world.ontology,
                job.pre_states[rnd.step_id],
                job.plan.step(rnd.step_id).effect,
            )
        txn.step_states[rnd.step_id] = StepState.ARRANGED
        txn.last_msg[rnd.step_id] = sim.now
        self._trace(sim, txn, "arrangement", event="step_assigned", step=rnd.step_id,
                    provider=chosen.provider_id, cost=chosen.agreed_cost,
                    duration=chosen.agreed_duration)
        job.pending.remove(rnd.step_id)
        self._advance_arrange(txn, sim)

    def _arrange_failed(self, txn: Transaction, step_id: str, sim: Simulation) -> None:
        self._trace(sim, txn, "arrangement", event="failed", step=step_id)
        txn.arrange = None
        self._begin_winddown(txn, OUTCOME_UNABLE, sim)

    def _finish_arrange(self, txn: Transaction, sim: Simulation) -> None:
        job = txn.arrange
        assert job is not None
        txn.arrange = None
        txn.active_plan = job.plan
        txn.workflow.plan = job.plan
        txn.phase = "executing"
        self._advance(txn, sim)

    # -- planning ----------------------------------------------------------------------

    def _do_plan(self, txn: Transaction, sim: Simulation) -> None:
        world = self.repository.world
        if not isinstance(txn.task.precondition, fm.TrueFormula):
            if not fm.evaluate(txn.task.precondition, world):
                self._trace(sim, txn, "txn", event="precondition_unsatisfied")
                self._begin_winddown(txn, OUTCOME_UNABLE, sim)
                return
        try:
            plan = pl.plan(
                txn.task, self.registry, world, self.store,
                budget=self.config.search_budget,
                exclude=frozenset(txn.excluded_providers),
                start_index=txn.step_counter + 1,
            )
        except PlanningError as exc:
            self._trace(sim, txn, "txn", event="unsolvable", detail=str(exc))
            self._begin_winddown(txn, OUTCOME_UNABLE, sim)
            return
        txn.step_counter += len(plan.steps)
        self._trace(sim, txn, "txn", event="planned", steps=len(plan.steps),
                    plan=plan.describe())
        if plan.is_empty:
            txn.active_plan = plan
            txn.workflow.plan = plan
            txn.phase = "executing"
            self._advance(txn, sim)
        else:
            self._start_arrange(txn, plan, "initial", sim)

    def _do_replan(self, txn: Transaction, sim: Simulation) -> None:
        if txn.replans >= self.config.replan_limit:
            self._trace(sim, txn, "txn", event="replan_limit")
            self._begin_winddown(txn, OUTCOME_UNABLE, sim)
            return
        # Steps of the superseded plan that never started are abandoned.
        if txn.active_plan is not None:
            for step in txn.active_plan.steps:
                if txn.step_states.get(step.step_id) is StepState.ARRANGED:
                    self._apply_event(sim, txn, step.step_id, EVT_ABORT)
        try:
            plan = pl.replan(
                txn.task, self.repository.world, frozenset(txn.excluded_providers),
                self.registry, self.store, budget=self.config.search_budget,
                start_index=txn.step_counter + 1,
            )
        except PlanningError as exc:
            self._trace(sim, txn, "txn", event="unsolvable", detail=str(exc))
            self._begin_winddown(txn, OUTCOME_UNABLE, sim)
            return
        txn.replans += 1
        txn.step_counter += len(plan.steps)
        txn.recovery = None
        self._trace(sim, txn, "txn", event="replanned", steps=len(plan.steps),
                    excluded=sorted(txn.excluded_providers), plan=plan.describe())
        if plan.is_empty:
            txn.active_plan = plan
            txn.workflow.plan = plan
            txn.phase = "executing"
            self._advance(txn, sim)
        else:
            self._start_arrange(txn, plan, "recover", sim)

    # -- execution ---------------------------------------------------------------------

    def _advance(self, txn: Transaction, sim: Simulation) -> None:
        if txn.terminal or txn.phase in ("queued", "done"):
            return
        if txn.phase == "planning":
            self._do_plan(txn, sim)
            return
        if txn.phase == "winddown":
            self._advance_winddown(txn, sim)
            return
        if txn.cancel_requested:
            self._begin_winddown(txn, OUTCOME_CANCELED, sim)
            return
        if txn.phase == "arranging":
            self._advance_arrange(txn, sim)
            return
        # executing
        if txn.recovery is not None or txn.recovery_queue:
            self._advance_recovery(txn, sim)
            return
        self._invoke_ready(txn, sim)
        self._check_complete(txn, sim)

    def _busy_providers(self, txn: Transaction) -> set[str]:
        busy = set()
        for step_id, state in txn.step_states.items():
            if state in WAITING_STATES:
                provider = txn.provider_of(step_id)
                if provider:
                    busy.add(provider)
        return busy

    def _invoke_ready(self, txn: Transaction, sim: Simulation) -> None:
        plan = txn.active_plan
        if plan is None:
            return
        busy = self._busy_providers(txn)
        for step in plan.steps:
            sid = step.step_id
            if txn.step_states.get(sid) is not StepState.ARRANGED:
                continue
            preds = plan.predecessors(sid)
            if any(txn.step_states.get(p) is not StepState.COMPLETED for p in preds):
                continue
            commitment = txn.workflow.assignments[sid]
            if commitment.provider_id in busy:
                continue  # unordered steps execute concurrently only on distinct providers
            if sim.now > commitment.expiry:
                self._trace(sim, txn, "arrangement", event="commitment_expired", step=sid)
                self._start_arrange(
                    txn,
                    plan,
                    "reassign",
                    sim,
                    keep_compensations=True,
                )
                txn.arrange.pending = [sid]
                return
            sim.send(self.actor_id, commitment.provider_id,
                     sv.Invoke(txn.id, sid, commitment, commitment.inputs))
            self._apply_event(sim, txn, sid, EVT_INVOKE)
            txn.last_msg[sid] = sim.now
            busy.add(commitment.provider_id)

    def _check_complete(self, txn: Transaction, sim: Simulation) -> None:
        plan = txn.active_plan
        if plan is None or txn.arrange is not None:
            return
        if txn.recovery is not None or txn.recovery_queue:
            return
        for step in plan.steps:
            if txn.step_states.get(step.step_id) is not StepState.COMPLETED:
                return
        # Verify the task effect against the authoritative map.
        if fm.evaluate(txn.task.effect, sim.env.world):
            self._finish(txn, OUTCOME_COMPLETED, sim)
        else:
            self._trace(sim, txn, "txn", event="verification_failed")
            txn.recovery_queue.append(_RecoveryItem("verify"))
            self._advance_recovery(txn, sim)

    # -- recovery ----------------------------------------------------------------------

    def _quiesced(self, txn: Transaction) -> bool:
        return not txn.steps_in(WAITING_STATES)

    def _advance_recovery(self, txn: Transaction, sim: Simulation) -> None:
        if txn.recovery is None:
            if not txn.recovery_queue:
                return
            item = txn.recovery_queue.popleft()
            txn.recovery = self._init_recovery(txn, item, sim)
            if txn.recovery is None:
                return
        self._advance_recovery_stage(txn, txn.recovery, sim)

    def _init_recovery(self, txn: Transaction, item: _RecoveryItem, sim: Simulation) -> _Recovery | None:
        if item.kind == "fault":
            rec = _Recovery(item, stage="")
            if item.described:
                observations = _parse_observations(item.observations, self.repository.world)
                self.repository.update_with_observations(
                    observations, sim.now, cause=f"{txn.id}/{item.step_id}/fault-description"
                )
                rec.stage = "compensating_entry"
            else:
                rec.stage = "diagnosing"
                rec.diag = self._start_diag_for_step(txn, item.step_id, sim)
                if rec.diag is None:
                    self._worst_case_update(txn, item.step_id, sim)
                    rec.stage = "compensating_entry"
            return rec
        if item.kind == "verify":
            rec = _Recovery(item, stage="diagnosing")
            rec.diag = self._start_diag_for_task(txn, sim)
            if rec.diag is None:
                rec.stage = "quiesce"
            return rec
        # safeguard
        rec = _Recovery(item, stage="canceling_region")
        self._cancel_in_region(txn, item, sim)
        return rec

    def _advance_recovery_stage(self, txn: Transaction, rec: _Recovery, sim: Simulation) -> None:
        if rec.stage == "diagnosing":
            diag = rec.diag
            if diag is None or diag.stage == "done":
                rec.stage = ("compensating_entry" if rec.item.kind == "fault" else "quiesce")
            else:
                self._advance_diag(txn, rec, sim)
                if rec.diag is not None and rec.diag.stage != "done":
                    return
                rec.stage = ("compensating_entry" if rec.item.kind == "fault" else "quiesce")
        if rec.stage == "compensating_entry":
            step_id = rec.item.step_id
            compensation = txn.workflow.compensations.get(step_id or "")
            if step_id and compensation is not None and \
                    txn.step_states.get(step_id) is StepState.FAULTED:
                provider = txn.provider_of(step_id)
                if provider:
                    sim.send(self.actor_id, provider,
                             sv.Compensate(txn.id, step_id, compensation))
                    self._apply_event(sim, txn, step_id, EVT_COMPENSATE)
                    txn.last_msg[step_id] = sim.now
                    rec.comp_step = step_id
                    rec.stage = "compensating"
                    return
            rec.stage = "quiesce"
        if rec.stage == "compensating":
            state = txn.step_states.get(rec.comp_step or "")
            if state is StepState.COMPENSATING:
                return
            if rec.comp_step and state is StepState.COMPENSATED:
                compensation = txn.workflow.compensations.get(rec.comp_step)
                if compensation is not None:
                    self.repository.update_with_effect(
                        compensation.effect, sim.now,
                        cause=f"{txn.id}/{rec.comp_step}/compensated",
                    )
            rec.stage = "quiesce"
        if rec.stage == "canceling_region":
            waiting = [
                s for s in txn.steps_in({StepState.CANCELING})
            ]
            if waiting:
                return
            rec.stage = "resolving"
            self._start_resolution_for(txn, rec, sim)
            return
        if rec.stage == "resolving":
            return  # advanced by child-transaction outcomes
        if rec.stage == "quiesce":
            if not self._quiesced(txn):
                return
            if txn.recovery_queue:
                txn.recovery = None
                self._advance_recovery(txn, sim)
                return
            self._do_replan(txn, sim)

    def _cancel_in_region(self, txn: Transaction, item: _RecoveryItem, sim: Simulation) -> None:
        region = set()
        for _, value in item.binding:
            if isinstance(value, str):
                region.add(value)
        plan = txn.active_plan
        if plan is None:
            return
        for step in plan.steps:
            sid = step.step_id
            if txn.step_states.get(sid) in (StepState.INVOKED, StepState.ACTIVE):
                if region & set(step.region()):
                    provider = txn.provider_of(sid)
                    if provider:
                        sim.send(self.actor_id, provider, sv.Cancel(txn.id, sid))
                        self._apply_event(sim, txn, sid, EVT_CANCEL)
                        txn.last_msg[sid] = sim.now

    # -- diagnosis ---------------------------------------------------------------------

    def _worst_case_for(self, effect: fm.Formula) -> tuple[tuple[fm.Atom, bool], ...]:
        """Assume none of the effect's literals hold."""
        out = []
        try:
            literals = fm.conjuncts(effect)
        except Exception:
            literals = list(fm.atoms_of(effect))
        for literal in literals:
            positive = fm.Atom(literal.relation, literal.args)
            out.append((positive, literal.negated))
        return tuple(out)

    def _diag_atoms(self, task: fm.Task) -> tuple[fm.Atom, ...]:
        atoms = []
        for f in (task.effect, task.precondition):
            for atom in fm.atoms_of(f):
                positive = fm.Atom(atom.relation, atom.args)
                if positive not in atoms:
                    atoms.append(positive)
        return tuple(atoms)

    def _start_diag(self, txn: Transaction, region: frozenset[str],
                    atoms: tuple[fm.Atom, ...], worst_case, sim: Simulation) -> _Diag | None:
        candidates = self.registry.cognitive_entries(region,
                                                     exclude=frozenset(txn.excluded_providers))
        txn.diag_counter += 1
        diag = _Diag(
            step_id=f"d{txn.diag_counter}",
            region=region,
            atoms=atoms,
            worst_case=worst_case,
            candidates=candidates,
        )
        if not candidates:
            self._diag_fallback(txn, diag, sim)
        else:
            self._diag_try_next(txn, diag, sim)
        return diag

    def _start_diag_for_step(self, txn: Transaction, step_id: str | None,
                             sim: Simulation) -> _Diag | None:
        if step_id is None or txn.active_plan is None:
            return None
        step = txn.active_plan.step(step_id)
        self._trace(sim, txn, "diagnosis", event="requested", step=step_id)
        return self._start_diag(
            txn, step.region(), self._diag_atoms(step.task),
            self._worst_case_for(step.effect), sim,
        )

    def _start_diag_for_task(self, txn: Transaction, sim: Simulation) -> _Diag | None:
        region = frozenset(
            fm.mentioned_object_ids(txn.task.effect)
            | fm.mentioned_object_ids(txn.task.precondition)
        )
        self._trace(sim, txn, "diagnosis", event="requested", step="<task>")
        return self._start_diag(
            txn, region, self._diag_atoms(txn.task),
            self._worst_case_for(txn.task.effect), sim,
        )

    def _diag_try_next(self, txn: Transaction, diag: _Diag, sim: Simulation) -> None:
        if diag.index >= len(diag.candidates):
            self._diag_fallback(txn, diag, sim)
            return
        entry = diag.candidates[diag.index]
        intention = sv.Intention(
            fm.Task(fm.TRUE, fm.TRUE), self.actor_id, txn.id, diag.step_id,
            service_type=entry.description.type_name,
        )
        sim.send(self.actor_id, entry.provider_id, intention)
        diag.stage = "intending"
        diag.deadline = sim.now + self.config.timeout_ticks
        self._trace(sim, txn, "diagnosis", event="intention_sent",
                    provider=entry.provider_id, step=diag.step_id)

    def _diag_fallback(self, txn: Transaction, diag: _Diag, sim: Simulation) -> None:
        self.repository.update_with_observations(
            diag.worst_case, sim.now, cause=f"{txn.id}/{diag.step_id}/worst-case"
        )
        self._trace(sim, txn, "diagnosis", event="worst_case_assumed", step=diag.step_id)
        diag.stage = "done"

    def _route_diag(self, txn: Transaction, payload, sim: Simulation) -> bool:
        rec = txn.recovery
        diag = rec.diag if rec is not None else None
        if diag is None or getattr(payload, "step_id", None) != diag.step_id:
            return False
        if isinstance(payload, sv.Committed):
            diag.commitment = payload.commitment
            entry = diag.candidates[diag.index]
            atoms = diag.atoms
            sim.send(self.actor_id, entry.provider_id,
                     sv.Invoke(txn.id, diag.step_id, payload.commitment,
                               atoms_of_interest=atoms, region=diag.region))
            diag.stage = "executing"
            diag.deadline = sim.now + self.config.timeout_ticks
            return True
        if isinstance(payload, sv.Refusal):
            diag.index += 1
            self._diag_try_next(txn, diag, sim)
            return True
        if isinstance(payload, sv.SituationReportMsg):
            self._merge_report(payload.report, sim,
                               cause=f"{txn.id}/{diag.step_id}/diagnosis")
            diag.report_merged = True
            self._trace(sim, txn, "diagnosis", event="report_merged",
                        step=diag.step_id, atoms=len(payload.report.observed))
            return True
        if isinstance(payload, sv.Completed):
            if not diag.report_merged:
                diag.index += 1
                self._diag_try_next(txn, diag, sim)
                return True
            diag.stage = "done"
            self._advance(txn, sim)
            return True
        if isinstance(payload, (sv.Fault, sv.Progress)):
            if isinstance(payload, sv.Fault):
                diag.index += 1
                self._diag_try_next(txn, diag, sim)
            else:
                diag.deadline = sim.now + self.config.timeout_ticks
            return True
        return False

    def _advance_diag(self, txn: Transaction, rec: _Recovery, sim: Simulation) -> None:
        diag = rec.diag
        if diag is None or diag.stage == "done":
            return
        if sim.now >= diag.deadline:
            diag.index += 1
            self._diag_try_next(txn, diag, sim)

    def _merge_report(self, report: sv.SituationReport, sim: Simulation, cause: str) -> None:
        if report.observed:
            self.repository.update_with_observations(report.observed, sim.now, cause=cause)
        if report.region:
            self.repository.sync_region(report.region, report.region_tuples, sim.now, cause)

    def _worst_case_update(self, txn: Transaction, step_id: str | None, sim: Simulation) -> None:
        if step_id is None or txn.active_plan is None:
            return
        step = txn.active_plan.step(step_id)
        self.repository.update_with_observations(
            self._worst_case_for(step.effect), sim.now,
            cause=f"{txn.id}/{step_id}/worst-case",
        )
        self._trace(sim, txn, "diagnosis", event="worst_case_assumed", step=step_id)

    # -- safeguards ----------------------------------------------------------------------

    def _on_safeguard(self, safeguard_id: str, binding: fm.Binding, sim: Simulation) -> None:
        if self.store is None:
            return
        key = (safeguard_id, binding_key(binding))
        if key in self.handled_safeguards:
            return
        self.handled_safeguards[key] = "active"
        # Learn the critical situation's literals; planning must see them.
        sg = self.store.get(safeguard_id)
        ground = fm.substitute(sg.critical, binding)
        try:
            literals = fm.conjuncts(ground)
        except Exception:
            literals = []
        observations = [
            (fm.Atom(l.relation, l.args), not l.negated)
            for l in literals
            if self.repository.world.ontology.relations.get(l.relation) is not None
            and self.repository.world.ontology.relations[l.relation].semantics == "extensional"
        ]
        if observations:
            self.repository.update_with_observations(
                observations, sim.now, cause=f"safeguard/{safeguard_id}"
            )
        txn = self.txns.get(self.current_root) if self.current_root else None
        if txn is not None and not txn.terminal and txn.phase in ("arranging", "executing"):
            txn.safeguard_activations += 1
            item = _RecoveryItem("safeguard", safeguard_id=safeguard_id,
                                 binding=binding_key(binding))
            txn.recovery_queue.appendleft(item)  # safety first
            self._trace(sim, txn, "safeguard", event="interrupt",
                        safeguard=safeguard_id,
                        binding={k: v for k, v in sorted(binding.items())})
            if txn.phase == "executing":
                self._advance(txn, sim)
        else:
            self._start_standalone_resolution(safeguard_id, binding, sim)

    def _resolution_task(self, resolution: _Resolution) -> fm.Task:
        alternative = resolution.alternatives[resolution.index]
        return fm.Task(
            fm.substitute(resolution.critical, resolution.binding),
            fm.substitute(alternative, resolution.binding),
        )

    def _start_resolution_for(self, txn: Transaction, rec: _Recovery, sim: Simulation) -> None:
        assert rec.item.safeguard_id is not None
        sg = self.store.get(rec.item.safeguard_id)
        resolution = _Resolution(
            sg.id, dict(rec.item.binding), sg.safe_alternatives, sg.critical, txn.id
        )
        self.resolutions.append(resolution)
        self._launch_resolution_child(resolution, sim)

    def _start_standalone_resolution(self, safeguard_id: str, binding: fm.Binding,
                                     sim: Simulation) -> None:
        sg = self.store.get(safeguard_id)
        resolution = _Resolution(sg.id, dict(binding), sg.safe_alternatives, sg.critical, None)
        self.resolutions.append(resolution)
        self._launch_resolution_child(resolution, sim)

    def _launch_resolution_child(self, resolution: _Resolution, sim: Simulation) -> None:
        task = self._resolution_task(resolution)
        child_id = self.submit_task(
            task, submit_tick=sim.now, purpose="resolution", parent=resolution.parent_txn
        )
        resolution.child_txn = child_id
        child = self.txns[child_id]
        child.phase = "planning"
        self.scheduled = [(t, i) for t, i in self.scheduled if i != child_id]
        self._trace(sim, child, "safeguard", event="resolution_attempt",
                    safeguard=resolution.safeguard_id,
                    alternative=resolution.index + 1,
                    parent=resolution.parent_txn)
        self._advance(child, sim)

    def _resolution_for_child(self, txn_id: str) -> _Resolution | None:
        for resolution in self.resolutions:
            if resolution.child_txn == txn_id:
                return resolution
        return None

    def _on_resolution_child_done(self, resolution: _Resolution, child: Transaction,
                                  sim: Simulation) -> None:
        key = (resolution.safeguard_id, binding_key(resolution.binding))
        parent = self.txns.get(resolution.parent_txn) if resolution.parent_txn else None
        if child.outcome == OUTCOME_COMPLETED:
            activation = self._open_activation(key)
            if activation is not None:
                self.store.mark_resolved(activation, resolution.index + 1, sim.now)
            self.handled_safeguards.pop(key, None)
            self.resolutions.remove(resolution)
            self._trace(sim, child, "safeguard", event="resolution_succeeded",
                        safeguard=resolution.safeguard_id,
                        alternative=resolution.index + 1)
            if parent is not None and not parent.terminal:
                parent.safeguard_resolutions += 1
                rec = parent.recovery
                if rec is not None and rec.stage == "resolving":
                    rec.stage = "quiesce"
                self._advance(parent, sim)
            return
        resolution.index += 1
        if resolution.index < len(resolution.alternatives):
            self._launch_resolution_child(resolution, sim)
            return
        activation = self._open_activation(key)
        if activation is not None:
            self.store.mark_unresolvable(activation)
        self.handled_safeguards.pop(key, None)
        self.resolutions.remove(resolution)
        self._trace(sim, child, "safeguard", event="unresolvable",
                    safeguard=resolution.safeguard_id)
        if parent is not None and not parent.terminal:
            self._begin_winddown(parent, OUTCOME_UNABLE, sim)

    def _open_activation(self, key: tuple):
        if self.store is None:
            return None
        for activation in self.store.open_activations():
            if activation.key == key:
                return activation
        return None

    # -- wind-down -------------------------------------------------------------------------

    def _begin_winddown(self, txn: Transaction, target: str, sim: Simulation) -> None:
        if txn.terminal or txn.winddown is not None:
            if txn.winddown is not None and not txn.terminal:
                self._advance_winddown(txn, sim)
            return
        txn.phase = "winddown"
        txn.cancel_requested = False
        txn.arrange = None
        txn.recovery = None
        txn.recovery_queue.clear()
        txn.winddown = _Winddown(target)
        self._trace(sim, txn, "txn", event="winddown", target=target)
        for sid in txn.steps_in({StepState.INVOKED, StepState.ACTIVE}):
            provider = txn.provider_of(sid)
            if provider:
                sim.send(self.actor_id, provider, sv.Cancel(txn.id, sid))
                self._apply_event(sim, txn, sid, EVT_CANCEL)
                txn.last_msg[sid] = sim.now
        self._advance_winddown(txn, sim)

    def _advance_winddown(self, txn: Transaction, sim: Simulation) -> None:
        ctx = txn.winddown
        if ctx is None or txn.terminal:
            return
        if ctx.stage == "canceling":
            if not self._quiesced(txn):
                return
            ctx.stage = "compensating"
        if ctx.stage == "compensating":
            if ctx.comp_step is not None:
                state = txn.step_states.get(ctx.comp_step)
                if state is StepState.COMPENSATING:
                    return
                if state is StepState.COMPENSATED:
                    compensation = txn.workflow.compensations.get(ctx.comp_step)
                    if compensation is not None:
                        self.repository.update_with_effect(
                            compensation.effect, sim.now,
                            cause=f"{txn.id}/{ctx.comp_step}/compensated",
                        )
                ctx.comp_step = None
            for sid in reversed(txn.completed_order):
                if sid in ctx.attempted:
                    continue
                if txn.step_states.get(sid) is not StepState.COMPLETED:
                    continue
                ctx.attempted.add(sid)
                compensation = txn.workflow.compensations.get(sid)
                if compensation is None:
                    self._trace(sim, txn, "txn", event="missing_compensation", step=sid)
                    continue
                provider = txn.provider_of(sid)
                if provider is None:
                    continue
                sim.send(self.actor_id, provider, sv.Compensate(txn.id, sid, compensation))
                self._apply_event(sim, txn, sid, EVT_COMPENSATE)
                txn.last_msg[sid] = sim.now
                ctx.comp_step = sid
                return
            self._finish(txn, ctx.target, sim)

    # -- completion --------------------------------------------------------------------------

    def _finish(self, txn: Transaction, outcome: str, sim: Simulation) -> None:
        if txn.terminal:
            return
        for sid, state in sorted(txn.step_states.items()):
            if state not in TERMINAL_STATES:
                self._apply_event(sim, txn, sid, EVT_ABORT)
        txn.outcome = outcome
        txn.phase = "done"
        txn.winddown = None
        self._trace(sim, txn, "txn", event="outcome", outcome=outcome,
                    replans=txn.replans)
        resolution = self._resolution_for_child(txn.id)
        if resolution is not None:
            self._on_resolution_child_done(resolution, txn, sim)
        if self.current_root == txn.id:
            self.current_root = None
            self._maybe_start_next(sim)

    def _maybe_start_next(self, sim: Simulation) -> None:
        while self.current_root is None and self.root_queue:
            txn_id = self.root_queue.popleft()
            txn = self.txns[txn_id]
            if txn.terminal:
                continue
            self.current_root = txn_id
            txn.phase = "planning"
            self._trace(sim, txn, "txn", event="started",
                        task_effect=fm.print_formula(txn.task.effect))
            self._advance(txn, sim)

    # -- per-tick ---------------------------------------------------------------------------

    def on_tick(self, sim: Simulation) -> None:
        due = [txn_id for tick, txn_id in self.scheduled if tick <= sim.now]
        if due:
            self.scheduled = [(t, i) for t, i in self.scheduled if i not in due]
            for txn_id in due:
                if self.txns[txn_id].phase == "queued":
                    self.root_queue.append(txn_id)
            self._maybe_start_next(sim)
        due_cancels = [txn_id for tick, txn_id in self.scheduled_cancels if tick <= sim.now]
        if due_cancels:
            self.scheduled_cancels = [
                (t, i) for t, i in self.scheduled_cancels if i not in due_cancels
            ]
            for txn_id in due_cancels:
                if not self.txns[txn_id].terminal:
                    self.cancel_transaction(txn_id, sim)
        for txn_id in self.txn_order:
            txn = self.txns[txn_id]
            if txn.terminal or txn.phase in ("queued", "done"):
                continue
            self._check_timeouts(txn, sim)
            self._advance(txn, sim)

    def _check_timeouts(self, txn: Transaction, sim: Simulation) -> None:
        timeout = self.config.timeout_ticks
        for sid in list(txn.step_states):
            state = txn.step_states[sid]
            if state not in (StepState.INVOKED, StepState.ACTIVE,
                             StepState.CANCELING, StepState.COMPENSATING):
                continue
            last = txn.last_msg.get(sid, txn.created_at)
            if sim.now - last <= timeout:
                continue
            if state in (StepState.INVOKED, StepState.ACTIVE):
                self._apply_event(sim, txn, sid, EVT_SILENCE, note="silent failure")
                provider = txn.provider_of(sid)
                if provider:
                    txn.excluded_providers.add(provider)
                txn.recovery_queue.append(_RecoveryItem("fault", sid, (), False))
                self._trace(sim, txn, "txn", event="fault_detected", step=sid,
                            described=False, silent=True)
            elif state is StepState.CANCELING:
                self._apply_event(sim, txn, sid, EVT_SILENCE,
                                  note="no cancellation confirmation")
            else:
                self._apply_event(sim, txn, sid, EVT_SILENCE,
                                  note="compensation timed out")


def _parse_observations(observations: tuple[tuple[str, bool], ...], world):
    out = []
    for text, truth in observations:
        try:
            atom = fm.parse(text)
        except Exception:
            continue
        if isinstance(atom, fm.Atom):
            out.append((fm.Atom(atom.relation, atom.args), truth))
    return out


# --- module-level operations -------------------------------------------------------------


def run_transaction(sim: Simulation, tm: TaskManager, task: fm.Task,
                    deadline: int | None = None) -> Transaction:
    """Submit a task and run the simulation until its transaction ends."""
    txn_id = tm.submit_task(task, submit_tick=sim.now, deadline=deadline)
    sim.run_until(lambda: tm.txns[txn_id].terminal)
    return tm.txns[txn_id]


def cancel_transaction(sim: Simulation, tm: TaskManager, txn_id: str) -> None:
    tm.cancel_transaction(txn_id, sim)
