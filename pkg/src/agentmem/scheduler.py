"""Execution orchestration on a virtual clock.

Three modes over a plan's subtask DAG:
  serial — subtasks back to back in topological order.
  coarse — whole subtasks run concurrently; a consumer starts only after all
           of its producer subtasks fully complete.
  fine   — individual steps start as soon as their step-graph predecessors
           (intra-subtask order plus producer emit steps) are done.

Two subtasks on the same app always serialize: one virtual executor per app
instance. The app grants its turn in topological order, which also makes the
mode dominance T_fine <= T_coarse <= T_serial hold by construction.

Semantics and timing are separated: subtasks execute once (in topological
order, so produced values flow to consumers), and the recorded step durations
are then laid out per mode. App behavior only depends on the app's own step
sequence, so the interleaving cannot change what the steps do.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .config import Config, DEFAULT
from .errors import CycleDetected, UnboundConsumer
from .experience_memory import ExecutablePlan, PlannedSubtask, fill_parameters, retrieve_template
from .profile_memory import retrieve_profile
from .record_replay import Memories, RunResult, SuspendedRun, TaskExecutor
from .ui_model import ActionKind, Outcome, TraceRecord


class ExecutionMode(str, Enum):
    SERIAL = "serial"
    COARSE = "coarse"
    FINE = "fine"


# -- background update queues ---------------------------------------------------


@dataclass
class _QueueItem:
    seq: int
    kind: str
    fn: object
    label: str


class BackgroundQueueSet:
    """Three strict-priority queues: experience = action > profile.

    Experience and action items share the top tier and drain FIFO by enqueue
    time; a profile item is dequeued only when both higher queues are empty.
    """

    KINDS = ("profile", "experience", "action")

    def __init__(self):
        self._queues: dict[str, deque[_QueueItem]] = {k: deque() for k in self.KINDS}
        self._seq = 0
        self.processed: list[tuple[str, str]] = []

    def enqueue(self, kind: str, fn, label: str = "") -> None:
        if kind not in self._queues:
            raise ValueError(f"unknown queue {kind!r}")
        self._seq += 1
        self._queues[kind].append(_QueueItem(self._seq, kind, fn, label))

    def pending(self, kind: str | None = None) -> int:
        if kind is None:
            return sum(len(q) for q in self._queues.values())
        return len(self._queues[kind])

    def _pop_next(self) -> _QueueItem | None:
        top = [q[0] for k, q in self._queues.items() if k != "profile" and q]
        if top:
            item = min(top, key=lambda it: it.seq)
            self._queues[item.kind].popleft()
            return item
        if self._queues["profile"]:
            return self._queues["profile"].popleft()
        return None

    def drain(self, budget: int | None = None) -> list[tuple[str, str]]:
        done = []
        while budget is None or len(done) < budget:
            item = self._pop_next()
            if item is None:
                break
            item.fn()
            self.processed.append((item.kind, item.label))
            done.append((item.kind, item.label))
        return done


def enqueue_background(queues: BackgroundQueueSet, update, kind: str, label: str = "") -> None:
    queues.enqueue(kind, update, label)


def drain_background(queues: BackgroundQueueSet, budget: int | None = None) -> list[tuple[str, str]]:
    return queues.drain(budget)


# -- planning -------------------------------------------------------------------


@dataclass
class PlanTiming:
    profile_span: tuple[int, int]
    template_span: tuple[int, int]
    rewrite_span: tuple[int, int]

    @property
    def total_ms(self) -> int:
        return self.rewrite_span[1] - min(self.profile_span[0], self.template_span[0])


def plan(
    task_text: str,
    memories: Memories,
    oracles,
    config: Config = DEFAULT,
    start_ms: int = 0,
) -> tuple[ExecutablePlan, PlanTiming]:
    """Planning stage: both retrievals overlap, then one rewriter call.

    Retrievals are independent reads and never wait on each other; on the
    virtual clock the rewrite starts once the slower of the two finishes.
    """
    profile_ctx = None
    if memories.profile is not None and memories.profile.node_count():
        profile_ctx = retrieve_profile(task_text, memories.profile, config.retrieval_k, config.token_budget)
    hit = retrieve_template(task_text, memories.templates, config.min_template_similarity)

    retrieval_end = start_ms + max(config.plan_profile_ms, config.plan_template_ms)
    timing = PlanTiming(
        profile_span=(start_ms, start_ms + config.plan_profile_ms),
        template_span=(start_ms, start_ms + config.plan_template_ms),
        rewrite_span=(retrieval_end, retrieval_end + config.plan_rewrite_ms),
    )
    if hit is None:
        out = ExecutablePlan(template_id=None, task_text=task_text, profile_context=profile_ctx)
        out.subtasks.append(
            PlannedSubtask(subtask_id="auto", app_id=None, task_text=task_text, template_id=None, steps=[])
        )
        # the rewriter still sees the task once, with whatever context exists
        oracles.task_rewriter.rewrite(task_text, profile_ctx.rendered() if profile_ctx else "")
        return out, timing
    template, _ = hit
    out = fill_parameters(template, task_text, oracles.task_rewriter, store=memories.templates, profile_context=profile_ctx)
    return out, timing


# -- step graph -------------------------------------------------------------------


StepId = tuple[str, int]  # (subtask id, step position)


@dataclass
class StepGraph:
    nodes: list[StepId] = field(default_factory=list)
    edges: list[tuple[StepId, StepId]] = field(default_factory=list)

    def predecessors(self, node: StepId) -> list[StepId]:
        return [a for a, b in self.edges if b == node]


def _emit_step_index(subtask: PlannedSubtask, output_slot: str) -> int | None:
    for i, step in enumerate(subtask.steps):
        hint = step.action_hint
        if hint is not None and hint.kind is ActionKind.EMIT_OUTPUT and hint.output_slot == output_slot:
            return i
    return None


def build_step_graph(plan: ExecutablePlan) -> StepGraph:
    """Intra-subtask chains plus producer-emit -> consumer-step data edges."""
    graph = StepGraph()
    by_id = {s.subtask_id: s for s in plan.subtasks}
    for sub in plan.subtasks:
        for i in range(len(sub.steps)):
            graph.nodes.append((sub.subtask_id, i))
            if i > 0:
                graph.edges.append(((sub.subtask_id, i - 1), (sub.subtask_id, i)))
    for sub in plan.subtasks:
        for i, step in enumerate(sub.steps):
            for slot, (producer_id, output) in step.consumes.items():
                if producer_id not in by_id:
                    raise UnboundConsumer(f"{sub.subtask_id}: slot {slot} bound to unknown producer {producer_id}")
                emit_i = _emit_step_index(by_id[producer_id], output)
                if emit_i is None:
                    raise UnboundConsumer(f"{sub.subtask_id}: producer {producer_id} never emits {output}")
                graph.edges.append(((producer_id, emit_i), (sub.subtask_id, i)))

    # Kahn over steps to reject any cycle explicit ordering edges might create
    indeg = {n: 0 for n in graph.nodes}
    for _, b in graph.edges:
        indeg[b] += 1
    ready = [n for n in graph.nodes if indeg[n] == 0]
    seen = 0
    while ready:
        cur = ready.pop()
        seen += 1
        for a, b in graph.edges:
            if a == cur:
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
    if seen != len(graph.nodes):
        raise CycleDetected("step graph has a cycle")
    return graph


# -- timeline ----------------------------------------------------------------------


@dataclass
class TimelineEntry:
    subtask: str
    step_index: int
    kind: str
    start: int
    end: int


@dataclass
class Timeline:
    mode: ExecutionMode
    start_ms: int = 0
    entries: list[TimelineEntry] = field(default_factory=list)

    @property
    def t_total(self) -> int:
        if not self.entries:
            return 0
        return max(e.end for e in self.entries) - self.start_ms

    def subtask_span(self, subtask: str) -> tuple[int, int]:
        spans = [e for e in self.entries if e.subtask == subtask]
        return (min(e.start for e in spans), max(e.end for e in spans))

    def entry(self, subtask: str, step_index: int) -> TimelineEntry:
        for e in self.entries:
            if e.subtask == subtask and e.step_index == step_index:
                return e
        raise KeyError((subtask, step_index))

    def respects(self, graph: StepGraph) -> bool:
        """end(u) <= start(v) for every step-graph edge present in the timeline."""
        have = {(e.subtask, e.step_index): e for e in self.entries}
        for (a, b) in graph.edges:
            if a in have and b in have and have[a].end > have[b].start:
                return False
        return True

    def to_csv(self) -> str:
        lines = ["step,subtask,start,end"]
        for e in sorted(self.entries, key=lambda e: (e.start, e.subtask, e.step_index)):
            lines.append(f"{e.step_index},{e.subtask},{e.start},{e.end}")
        return "\n".join(lines) + "\n"


def _subtask_topo(plan: ExecutablePlan) -> list[str]:
    ids = sorted(s.subtask_id for s in plan.subtasks)
    producers: dict[str, set[str]] = {i: set() for i in ids}
    for sub in plan.subtasks:
        for producer_id, _ in sub.bindings.values():
            producers[sub.subtask_id].add(producer_id)
    for a, b in plan.order_edges:
        producers.setdefault(b, set()).add(a)
    order = []
    ready = sorted(i for i in ids if not producers[i])
    remaining = {i: set(p) for i, p in producers.items()}
    while ready:
        cur = ready.pop(0)
        order.append(cur)
        for i in ids:
            if cur in remaining.get(i, ()):
                remaining[i].discard(cur)
                if not remaining[i] and i not in order and i not in ready:
                    ready.append(i)
        ready.sort()
    if len(order) != len(ids):
        raise CycleDetected("subtask dependencies are cyclic")
    return order


@dataclass
class ExecutionReport:
    timeline: Timeline
    traces: list[TraceRecord]
    results: dict[str, RunResult]
    failed: list[str] = field(default_factory=list)


def execute(
    plan: ExecutablePlan,
    mode: ExecutionMode,
    env,
    memories: Memories,
    oracles,
    config: Config = DEFAULT,
    start_ms: int = 0,
) -> ExecutionReport:
    """Run the plan once, then lay its recorded durations out per mode."""
    env.reset()
    order = _subtask_topo(plan)
    by_id = {s.subtask_id: s for s in plan.subtasks}
    producers: dict[str, set[str]] = {
        sid: {p for p, _ in by_id[sid].bindings.values()} for sid in order
    }
    for a, b in plan.order_edges:
        producers[b].add(a)

    produced: dict[tuple[str, str], str] = {}
    results: dict[str, RunResult] = {}
    failed: list[str] = []

    for sid in order:
        sub = by_id[sid]
        if any(p in failed for p in producers[sid]):
            failed.append(sid)
            continue
        values = dict(plan.slot_values)
        missing = []
        for slot, key in sub.bindings.items():
            if key in produced:
                values[slot] = produced[key]
            else:
                missing.append(slot)
        if missing:
            failed.append(sid)
            continue
        executor = TaskExecutor(
            sub.task_text or plan.task_text,
            memories,
            env.cursor(),
            oracles,
            subtask=sub,
            slot_values=values,
            config=config,
        )
        result = executor.run()
        if isinstance(result, SuspendedRun):
            raise RuntimeError("interrupt scripts are not supported under scheduled execution")
        results[sid] = result
        if result.trace.outcome is not Outcome.SUCCESS:
            failed.append(sid)
            continue
        for slot, value in result.outputs.items():
            produced[(sid, slot)] = value

    timeline = _layout(plan, mode, order, producers, results, start_ms)
    traces = [results[sid].trace for sid in order if sid in results]
    return ExecutionReport(timeline=timeline, traces=traces, results=results, failed=failed)


def _layout(
    plan: ExecutablePlan,
    mode: ExecutionMode,
    order: list[str],
    producers: dict[str, set[str]],
    results: dict[str, RunResult],
    start_ms: int,
) -> Timeline:
    by_id = {s.subtask_id: s for s in plan.subtasks}
    timeline = Timeline(mode=mode, start_ms=start_ms)
    app_free: dict[str, int] = {}
    sub_end: dict[str, int] = {}
    emit_end: dict[tuple[str, str], int] = {}
    order_producers: dict[str, set[str]] = {sid: set() for sid in order}
    for a, b in plan.order_edges:
        if b in order_producers:
            order_producers[b].add(a)
    prev_end = start_ms

    for sid in order:
        if sid not in results:
            continue
        sub = by_id[sid]
        result = results[sid]
        app = sub.app_id or sid
        t = max(app_free.get(app, start_ms), start_ms)
        if mode is ExecutionMode.SERIAL:
            t = max(t, prev_end)
        elif mode is ExecutionMode.COARSE:
            for p in producers[sid]:
                if p in sub_end:
                    t = max(t, sub_end[p])
        else:  # fine: data deps bind at step level, explicit ordering at subtask level
            for p in order_producers[sid]:
                if p in sub_end:
                    t = max(t, sub_end[p])
        steps = result.trace.steps
        for i, (_, action) in enumerate(steps):
            start = t
            if mode is ExecutionMode.FINE and i < len(sub.steps):
                for _, key in sub.steps[i].consumes.items():
                    if key in emit_end:
                        start = max(start, emit_end[key])
            end = start + result.durations[i]
            timeline.entries.append(TimelineEntry(sid, i, action.kind.value, start, end))
            if action.output_slot:
                emit_end[(sid, action.output_slot)] = end
            t = end
        sub_end[sid] = t
        app_free[app] = t
        prev_end = max(prev_end, t)
    return timeline
