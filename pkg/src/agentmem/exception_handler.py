"""User interventions as recoverable events.

An interrupt fires either on an explicit pause command or on a scripted manual
action whose kind or target conflicts with the action the agent is about to
take. Suspension freezes the executor before the pending action; resume
applies the user's corrections, reconciles the remaining plan against the new
screen, and continues. Correction traces feed template refinement so the same
intervention is not needed twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import AlreadySuspended, OracleTemplateInvalid
from .experience_memory import ExperienceTemplate, ResolvedStep, TemplateStore, validate_template
from .record_replay import RunResult, SuspendedRun
from .ui_model import Action, ActionKind, ElementSelector, Outcome, StepOrigin, TraceRecord, UIState


class InterruptKind(str, Enum):
    PAUSE_COMMAND = "pause_command"
    CONFLICTING_MANUAL_ACTION = "conflicting_manual_action"


@dataclass
class InterruptEvent:
    kind: InterruptKind
    payload: Action | None
    virtual_ms: int

    def __post_init__(self):
        if self.kind is InterruptKind.CONFLICTING_MANUAL_ACTION and self.payload is None:
            raise ValueError("manual-action interrupts carry the user's action")


@dataclass
class CorrectionSet:
    actions: list[Action] = field(default_factory=list)
    amendment: str = ""

    def __post_init__(self):
        if not self.actions and not self.amendment:
            raise ValueError("a correction set cannot be empty")


def _same_target(a: Action, b: Action) -> bool:
    ra = a.target.resource_id if a.target else ""
    rb = b.target.resource_id if b.target else ""
    ca = a.target.class_name if a.target else ""
    cb = b.target.class_name if b.target else ""
    return ra == rb and (not ca or not cb or ca == cb)


def conflicts(manual: Action, planned: Action) -> bool:
    """A manual action conflicts when its kind or its target differs."""
    if manual.kind != planned.kind:
        return True
    return not _same_target(manual, planned)


class InterruptScript:
    """Scenario-scripted events, each firing at a step index or virtual time."""

    def __init__(self, events: list[dict]):
        # event: {"at_step": int | "at_ms": int, "kind": "pause" | "manual",
        #         "action": {kind, target?, params?}}
        self.events = [dict(e) for e in events]
        self.fired: list[InterruptEvent] = []

    def _build_action(self, spec: dict, state: UIState | None) -> Action:
        target = None
        rid = spec.get("target")
        if rid:
            target = ElementSelector(resource_id=rid)
            if state is not None:
                for el, path in state.root.walk():
                    if el.resource_id == rid:
                        target = ElementSelector.of(el, path)
                        break
        return Action(kind=ActionKind(spec["kind"]), target=target, params=dict(spec.get("params", {})))

    def check(
        self, step_index: int, planned: Action, virtual_ms: int, state: UIState | None = None
    ) -> tuple[InterruptEvent | None, Action | None]:
        """Returns (interrupt, absorbed-user-action); consumes the fired event."""
        for event in self.events:
            due = ("at_step" in event and event["at_step"] == step_index) or (
                "at_ms" in event and event["at_ms"] <= virtual_ms
            )
            if not due:
                continue
            self.events.remove(event)
            if event["kind"] == "pause":
                fired = InterruptEvent(InterruptKind.PAUSE_COMMAND, None, virtual_ms)
                self.fired.append(fired)
                return fired, None
            manual = self._build_action(event["action"], state)
            if conflicts(manual, planned):
                fired = InterruptEvent(InterruptKind.CONFLICTING_MANUAL_ACTION, manual, virtual_ms)
                self.fired.append(fired)
                return fired, None
            return None, manual  # harmless pre-emption: the user just did the step
        return None, None


def check_interrupt(session, event_stream: InterruptScript, planned_action: Action, state: UIState | None = None):
    """Poll the event stream right before executing a planned action."""
    event, _ = event_stream.check(len(session.steps), planned_action, session.virtual_ms(), state)
    return event


@dataclass
class ExecutionContext:
    state: UIState
    remaining: list[ResolvedStep]
    history: TraceRecord
    slots: dict[str, str]
    reason: InterruptEvent
    suspended_run: SuspendedRun


def suspend(suspended: SuspendedRun) -> ExecutionContext:
    """Freeze a halted executor; the pending action has not run."""
    if suspended.consumed:
        raise AlreadySuspended("this suspension was already captured")
    suspended.consumed = True
    ex = suspended.executor
    remaining = list(ex.plan_steps[ex.step_i:]) if ex.plan_steps is not None else []
    history = TraceRecord(
        task_text=ex.task_text,
        steps=[(s, a) for s, a, _ in ex.session.steps],
        outcome=Outcome.INTERRUPTED,
        annotations=[o for _, _, o in ex.session.steps],
    )
    return ExecutionContext(
        state=ex.state,
        remaining=remaining,
        history=history,
        slots=dict(ex.slot_values),
        reason=suspended.event,
        suspended_run=suspended,
    )


def resume(context: ExecutionContext, corrections: CorrectionSet, env, oracles) -> RunResult | SuspendedRun:
    """Apply corrections, reconcile the plan with the new screen, continue.

    A correction identical to the pending step advances past it; otherwise the
    remaining steps are re-validated against the live screen and steps whose
    targets vanished are superseded. Anything else is regenerated by the
    operator inside the normal run loop.
    """
    ex = context.suspended_run.executor
    advanced = False
    for action in corrections.actions:
        before = ex.step_i
        ex.execute_correction(action)
        advanced = advanced or ex.step_i > before
    if corrections.amendment:
        ex.task_text = f"{ex.task_text} ({corrections.amendment})"
        ex.session.task_text = ex.task_text
    if not advanced and corrections.actions:
        ex.skip_superseded(window=len(corrections.actions))
    return ex.run()


def refine_template(
    full_trace: TraceRecord,
    original_template: ExperienceTemplate,
    generator,
    store: TemplateStore | None = None,
) -> ExperienceTemplate:
    """One generator call turning a corrected trace into a revised template.

    An invalid proposal keeps the original template in place.
    """
    if not any(o is StepOrigin.USER_CORRECTION for o in full_trace.annotations):
        raise ValueError("trace carries no user corrections")
    revised = generator.refine(original_template, full_trace)
    try:
        validate_template(revised)
    except OracleTemplateInvalid:
        return original_template
    if store is not None:
        store.store_revision(original_template.id, revised)
    return revised
