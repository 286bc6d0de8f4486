"""Record and replay: lossless trace capture, structural merge, verified reuse.

Every (state, action) pair at a decision point is buffered in a recording
session. Finalizing a successful run merges the path into the per-app state
tree, inserts step-to-action mappings for template-bound runs, and queues
unbound traces for template synthesis. Replay walks the same loop in reverse:
cached actions are verified against the live screen before execution and
anything stale is rolled back to the operator oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import action_memory, embedding
from .action_memory import (
    ActChain,
    ActTree,
    Verdict,
    actchain_lookup,
    acttree_lookup,
    acttree_record,
    reuse_rate,
    verify_action,
)
from .config import Config, DEFAULT
from .errors import MergeConflict, OperatorFailed, SessionClosed, StepLimitExceeded
from .experience_memory import (
    ExecutablePlan,
    PlannedSubtask,
    ResolvedStep,
    StepKind,
    TemplateStore,
    fill_parameters,
    retrieve_template,
    topo_order,
)
from .ui_model import Action, ActionKind, Outcome, StepOrigin, TraceRecord, UIState, save_trace


@dataclass
class RecordingSession:
    session_id: str
    task_text: str
    start_ms: int = 0
    steps: list[tuple[UIState, Action, StepOrigin]] = field(default_factory=list)
    app_stack: list[str] = field(default_factory=list)
    durations: list[int] = field(default_factory=list)
    finalized: bool = False
    stale_context: dict | None = None

    def virtual_ms(self) -> int:
        return self.start_ms + sum(self.durations)


def record_step(session: RecordingSession, state: UIState, action: Action, origin: StepOrigin) -> None:
    if session.finalized:
        raise SessionClosed(session.session_id)
    session.steps.append((state, action, origin))
    if action.kind is ActionKind.LAUNCH:
        app_id = action.params.get("app_id", "")
        if not session.app_stack or session.app_stack[-1] != app_id:
            session.app_stack.append(app_id)


class Memories:
    """All long-lived stores one executor needs, plus the session sink."""

    def __init__(
        self,
        templates: TemplateStore | None = None,
        profile=None,
        embedder: embedding.HashEmbedder | None = None,
        sessions_dir: Path | None = None,
        queues=None,
    ):
        self.embedder = embedder or embedding.HashEmbedder()
        self.templates = templates or TemplateStore(embedder=self.embedder)
        self.profile = profile
        self.acttrees: dict[str, ActTree] = {}
        self.actchains: dict[str, ActChain] = {}
        self.sessions_dir = Path(sessions_dir) if sessions_dir else None
        self.queues = queues
        self.unmerged: list[TraceRecord] = []
        self.pending_synthesis: list[TraceRecord] = []
        self._session_counter = 0

    def acttree(self, app_id: str) -> ActTree:
        if app_id not in self.acttrees:
            self.acttrees[app_id] = ActTree(app_id=app_id)
        return self.acttrees[app_id]

    def actchain(self, template_id: str) -> ActChain:
        if template_id not in self.actchains:
            self.actchains[template_id] = ActChain(template_id=template_id)
        return self.actchains[template_id]

    def new_session(self, task_text: str, start_ms: int = 0) -> RecordingSession:
        self._session_counter += 1
        return RecordingSession(session_id=f"s{self._session_counter:05d}", task_text=task_text, start_ms=start_ms)


@dataclass
class ChainBinding:
    template_id: str
    step_index: int
    kind: StepKind
    params: dict[str, str]


def _merge_acttree(memories: Memories, trace: TraceRecord, final_state: UIState | None, refresh: bool = False) -> None:
    """Walk the trace path and merge it edge by edge, checking conflicts first.

    The walk stops at the first user-corrected step: corrections are kept in
    the trace but never cached (template refinement owns that learning).

    A recorded edge now leading somewhere else means either app drift or
    environment nondeterminism. When the run itself witnessed staleness
    (``refresh``), the edge's child is repointed and the orphaned subtree
    dropped; otherwise the conflict is an error and the trace stays unmerged.
    """
    cut = len(trace.steps)
    for i, origin in enumerate(trace.annotations):
        if origin is StepOrigin.USER_CORRECTION:
            cut = i
            break
    task_vec = memories.embedder.embed(trace.task_text)

    planned: list[tuple[ActTree, str, str, Action, str]] = []
    for i in range(cut):
        state, action = trace.steps[i]
        if action.kind is ActionKind.LAUNCH:
            app_id = action.params.get("app_id", "")
        elif state.app_id != "launcher":
            app_id = state.app_id
        else:
            continue
        if i + 1 < len(trace.steps):
            child_fp = trace.steps[i + 1][0].fingerprint
        elif final_state is not None:
            child_fp = final_state.fingerprint
        else:
            continue
        tree = memories.acttree(app_id)
        summary = f"{state.app_id}/{state.screen_id}"
        planned.append((tree, state.fingerprint, summary, action, child_fp))

    for tree, fp, _, action, child_fp in planned:
        existing = tree.find_edge(fp, action)
        if existing is not None and existing.child != child_fp and not refresh:
            memories.unmerged.append(trace)
            raise MergeConflict(
                f"{tree.app_id}: action {action.kind.value} from {fp} led to {child_fp}, cached child {existing.child}"
            )
    repointed = False
    for tree, fp, summary, action, child_fp in planned:
        existing = tree.find_edge(fp, action)
        if existing is not None and existing.child != child_fp:
            existing.child = child_fp
            repointed = True
        acttree_record(tree, fp, summary, action, child_fp, trace.task_text, task_vec)
    if repointed:
        seen: set[int] = set()
        for tree, *_ in planned:
            if id(tree) not in seen:
                seen.add(id(tree))
                tree.prune_unreachable()


def _update_actchain(memories: Memories, trace: TraceRecord, bindings: list[ChainBinding | None]) -> None:
    if any(o is StepOrigin.USER_CORRECTION for o in trace.annotations):
        return
    for (state, action), binding in zip(trace.steps, bindings):
        if binding is None:
            continue
        chain = memories.actchain(binding.template_id)
        action_memory.actchain_record(chain, binding.step_index, binding.kind, binding.params, action)


def finalize_record(
    session: RecordingSession,
    memories: Memories,
    outcome: Outcome,
    final_state: UIState | None = None,
    chain_bindings: list[ChainBinding | None] | None = None,
    template_bound: bool = False,
    refresh_stale: bool = False,
) -> TraceRecord:
    """Close the session, persist the trace, and fold it into the memories."""
    if session.finalized:
        raise SessionClosed(session.session_id)
    session.finalized = True
    trace = TraceRecord(
        task_text=session.task_text,
        steps=[(s, a) for s, a, _ in session.steps],
        outcome=outcome,
        annotations=[o for _, _, o in session.steps],
    )
    if memories.sessions_dir is not None:
        save_trace(trace, memories.sessions_dir / f"{session.session_id}.json")
    if outcome is not Outcome.SUCCESS:
        return trace

    bindings = chain_bindings or [None] * len(trace.steps)

    def apply() -> None:
        _merge_acttree(memories, trace, final_state, refresh=refresh_stale)
        _update_actchain(memories, trace, bindings)

    if memories.queues is not None:
        memories.queues.enqueue("action", apply, label=f"merge:{session.session_id}")
    else:
        apply()
    if not template_bound:
        if memories.queues is not None:
            memories.queues.enqueue(
                "experience", lambda: memories.pending_synthesis.append(trace), label=f"synth:{session.session_id}"
            )
        else:
            memories.pending_synthesis.append(trace)
    return trace


@dataclass
class RunResult:
    trace: TraceRecord
    durations: list[int]
    outputs: dict[str, str]
    session_id: str
    stale_events: int = 0
    interrupt_events: int = 0

    @property
    def reuse(self) -> float:
        return reuse_rate(self.trace)


@dataclass
class SuspendedRun:
    """An executor halted by an interrupt, resumable with corrections."""

    executor: "TaskExecutor"
    pending_action: Action
    event: object
    consumed: bool = False


class TaskExecutor:
    """Step loop for one subtask: cache lookup, verify, execute, record.

    After the first stale cache hit the remainder of the run is driven by the
    operator oracle; the fresh suffix replaces the stale entries at finalize.
    """

    def __init__(
        self,
        task_text: str,
        memories: Memories,
        cursor,
        oracles,
        subtask: PlannedSubtask | None = None,
        slot_values: dict[str, str] | None = None,
        config: Config = DEFAULT,
        interrupt_script=None,
        start_ms: int = 0,
    ):
        self.task_text = task_text
        self.memories = memories
        self.cursor = cursor
        self.oracles = oracles
        self.subtask = subtask
        self.slot_values = dict(slot_values or {})
        if subtask is not None:
            self.slot_values.update({k: v for k, v in _collect_step_params(subtask).items()})
        self.config = config
        self.interrupts = interrupt_script
        self.session = memories.new_session(task_text, start_ms)
        self.task_vec = memories.embedder.embed(task_text)
        self.template_id = subtask.template_id if subtask else None
        self.plan_steps: list[ResolvedStep] | None = subtask.steps if (subtask and subtask.steps) else None
        self.state: UIState = cursor.state()
        self.step_i = 0
        self.operator_only = False
        self.stale_events = 0
        self.interrupt_events = 0
        self.outputs: dict[str, str] = {}
        self.chain_bindings: list[ChainBinding | None] = []

    # -- decision ----------------------------------------------------------

    def _step_params(self, planned: ResolvedStep) -> dict[str, str]:
        return {s: self.slot_values[s] for s in planned.slot_refs if s in self.slot_values}

    def _chain_decision(self, planned: ResolvedStep) -> tuple[Action, StepOrigin] | None:
        chain = self.memories.actchain(self.template_id)
        params = self._step_params(planned)
        cached = actchain_lookup(chain, planned.index, params)
        if cached is None:
            return None
        verified = verify_action(cached, self.state, self.config.match_weights, self.config.match_threshold)
        if verified is not None:
            return verified, StepOrigin.ACTCHAIN_REUSE
        self.stale_events += 1
        self.session.stale_context = {
            "source": "actchain",
            "template_id": self.template_id,
            "step_index": planned.index,
            "params": params,
        }
        action_memory.rollback_and_update(self.memories, self.task_text, cached, self.oracles.operator, self.cursor, self.session)
        self.operator_only = True
        return None

    def _tree_decision(self) -> tuple[Action, StepOrigin] | None:
        fp = self.state.fingerprint
        if self.state.app_id == "launcher":
            trees = [self.memories.acttrees[a] for a in sorted(self.memories.acttrees)]
        else:
            trees = [self.memories.acttree(self.state.app_id)]
        best = None
        best_tree = None
        depth = len(self.session.steps)
        for tree in trees:
            decision = acttree_lookup(
                tree, fp, self.task_vec, depth, self.config.tau0, self.config.tau_step, self.config.tau_cap
            )
            if decision.verdict is Verdict.REUSE and (best is None or decision.similarity > best.similarity):
                best, best_tree = decision, tree
        if best is None:
            return None
        verified = verify_action(best.action, self.state, self.config.match_weights, self.config.match_threshold)
        if verified is not None:
            return verified, StepOrigin.ACTTREE_REUSE
        self.stale_events += 1
        self.session.stale_context = {"source": "acttree", "app_id": best_tree.app_id, "fingerprint": fp}
        action_memory.rollback_and_update(self.memories, self.task_text, best.action, self.oracles.operator, self.cursor, self.session)
        self.operator_only = True
        return None

    def _decide(self, planned: ResolvedStep | None) -> tuple[Action, StepOrigin]:
        if not self.operator_only:
            if self.template_id is not None and planned is not None:
                hit = self._chain_decision(planned)
                if hit is not None:
                    return hit
            elif self.plan_steps is None:
                # only autonomous runs consult the per-app prefix cache; a
                # plan's resolved steps are authoritative for everything else
                hit = self._tree_decision()
                if hit is not None:
                    return hit
        hint = planned.action_hint if planned is not None else None
        action = self.oracles.operator.next_action(
            self.task_text, self.state, self.session.steps, hint=hint, slot_values=self.slot_values
        )
        return action, StepOrigin.ORACLE

    # -- run loop ------------------------------------------------------------

    def run(self) -> RunResult | SuspendedRun:
        while True:
            if len(self.session.steps) >= self.config.step_limit:
                finalize_record(self.session, self.memories, Outcome.FAILURE, template_bound=self.template_id is not None)
                raise StepLimitExceeded(self.task_text)
            planned = None
            if self.plan_steps is not None and self.step_i < len(self.plan_steps):
                planned = self.plan_steps[self.step_i]
            try:
                action, origin = self._decide(planned)
            except OperatorFailed:
                trace = finalize_record(
                    self.session, self.memories, Outcome.FAILURE, template_bound=self.template_id is not None
                )
                return RunResult(trace, list(self.session.durations), dict(self.outputs), self.session.session_id,
                                 self.stale_events, self.interrupt_events)

            if self.interrupts is not None:
                event, absorbed = self.interrupts.check(
                    len(self.session.steps), action, self.session.virtual_ms(), self.state
                )
                if event is not None:
                    self.interrupt_events += 1
                    return SuspendedRun(executor=self, pending_action=action, event=event)
                if absorbed is not None:
                    action, origin = absorbed, StepOrigin.USER_CORRECTION

            self._execute(action, origin)
            if action.kind is ActionKind.DONE:
                break
            if self.plan_steps is not None and self.step_i >= len(self.plan_steps):
                self.plan_steps = None  # plan exhausted, operator finishes the run
        trace = finalize_record(
            self.session,
            self.memories,
            Outcome.SUCCESS,
            final_state=self.state,
            chain_bindings=self.chain_bindings,
            template_bound=self.template_id is not None,
            refresh_stale=self.stale_events > 0,
        )
        return RunResult(trace, list(self.session.durations), dict(self.outputs), self.session.session_id,
                         self.stale_events, self.interrupt_events)

    def _execute(self, action: Action, origin: StepOrigin) -> None:
        planned = None
        if self.plan_steps is not None and self.step_i < len(self.plan_steps):
            planned = self.plan_steps[self.step_i]
        pre_state = self.state
        next_state, outputs, duration = self.cursor.step(action)
        record_step(self.session, pre_state, action, origin)
        self.session.durations.append(duration)
        if planned is not None and self.template_id is not None and origin is not StepOrigin.USER_CORRECTION:
            self.chain_bindings.append(
                ChainBinding(self.template_id, planned.index, planned.kind, self._step_params(planned))
            )
        else:
            self.chain_bindings.append(None)
        self.outputs.update(outputs)
        self.state = next_state
        self.step_i += 1

    def execute_correction(self, action: Action) -> None:
        """Apply one user-supplied action without interrupt checks."""
        planned_matches = False
        if self.plan_steps is not None and self.step_i < len(self.plan_steps):
            pending = self.plan_steps[self.step_i]
            if pending.action_hint is not None:
                hint = pending.action_hint
                planned_matches = (
                    hint.kind == action.kind
                    and (action.target.resource_id if action.target else "") == hint.resource_id
                )
        pre_state = self.state
        next_state, outputs, duration = self.cursor.step(action)
        record_step(self.session, pre_state, action, StepOrigin.USER_CORRECTION)
        self.session.durations.append(duration)
        self.chain_bindings.append(None)
        self.outputs.update(outputs)
        self.state = next_state
        if planned_matches:
            self.step_i += 1  # the user performed the pending step

    def skip_superseded(self, window: int) -> int:
        """Advance past planned steps invalidated by corrections.

        Scans at most ``window`` steps for the first one whose hinted target
        exists on the live screen; targetless steps are never skipped over.
        """
        if self.plan_steps is None or window <= 0:
            return 0
        live_rids = {el.resource_id for el, _ in self.state.root.walk()}
        for offset in range(1, window + 1):
            idx = self.step_i + offset
            if idx >= len(self.plan_steps):
                break
            hint = self.plan_steps[idx].action_hint
            if hint is not None and hint.resource_id and hint.resource_id in live_rids:
                self.step_i = idx
                return offset
        return 0


def _collect_step_params(subtask: PlannedSubtask) -> dict[str, str]:
    values: dict[str, str] = {}
    for step in subtask.steps:
        values.update(step.params)
    return values


def bind_task(task_text: str, memories: Memories, oracles, config: Config = DEFAULT) -> ExecutablePlan:
    """Template retrieval + parameter filling; autonomous plan when no match."""
    hit = retrieve_template(task_text, memories.templates, config.min_template_similarity)
    if hit is None:
        plan = ExecutablePlan(template_id=None, task_text=task_text)
        plan.subtasks.append(
            PlannedSubtask(subtask_id="auto", app_id=None, task_text=task_text, template_id=None, steps=[])
        )
        return plan
    template, _ = hit
    return fill_parameters(template, task_text, oracles.task_rewriter, store=memories.templates)


def replay(
    task_text: str,
    memories: Memories,
    env,
    oracles,
    config: Config = DEFAULT,
    plan: ExecutablePlan | None = None,
    interrupt_script=None,
) -> RunResult:
    """Execute one task from a fresh environment, reusing caches when safe.

    Multi-subtask plans run serially in topological order here; the scheduler
    owns the parallel modes.
    """
    env.reset()
    if plan is None:
        plan = bind_task(task_text, memories, oracles, config)

    ordered = plan.subtasks
    if plan.template_id is not None and len(plan.subtasks) > 1:
        template = memories.templates.get(plan.template_id)
        if template.subtasks is not None:
            order = topo_order(template.subtasks)
            by_id = {s.subtask_id: s for s in plan.subtasks}
            ordered = [by_id[sid] for sid in order]

    produced: dict[tuple[str, str], str] = {}
    last: RunResult | None = None
    for sub in ordered:
        values = dict(plan.slot_values)
        for slot, (producer, output) in sub.bindings.items():
            if (producer, output) in produced:
                values[slot] = produced[(producer, output)]
        executor = TaskExecutor(
            sub.task_text or task_text,
            memories,
            env.cursor(),
            oracles,
            subtask=sub,
            slot_values=values,
            config=config,
            interrupt_script=interrupt_script,
        )
        result = executor.run()
        if isinstance(result, SuspendedRun):
            return result  # caller owns suspension handling
        for slot, value in result.outputs.items():
            produced[(sub.subtask_id, slot)] = value
        if last is None:
            last = result
        else:
            last = RunResult(
                trace=TraceRecord(
                    task_text=task_text,
                    steps=last.trace.steps + result.trace.steps,
                    outcome=result.trace.outcome,
                    annotations=last.trace.annotations + result.trace.annotations,
                ),
                durations=last.durations + result.durations,
                outputs={**last.outputs, **result.outputs},
                session_id=result.session_id,
                stale_events=last.stale_events + result.stale_events,
                interrupt_events=last.interrupt_events + result.interrupt_events,
            )
        if result.trace.outcome is not Outcome.SUCCESS:
            break
    return last
