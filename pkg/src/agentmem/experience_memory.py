"""Experience templates: parameterized workflows with invariant/variable steps.

Templates come in two granularities. Low-level templates pin every step to a
concrete action hint (selector + kind + params), high-level ones carry
free-text goals only. Cross-app work hangs off a subtask DAG whose input
bindings wire producer outputs into consumer slots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import embedding
from .embedding import VectorIndex, top_k
from .errors import CorruptFile, CycleDetected, DuplicateId, MissingRequiredSlot, OracleTemplateInvalid
from .ui_model import ActionKind, Outcome, TraceRecord


class TemplateLevel(str, Enum):
    HIGH = "high"
    LOW = "low"


class StepKind(str, Enum):
    INVARIANT = "invariant"
    VARIABLE = "variable"


@dataclass
class SlotSpec:
    name: str
    description: str = ""
    required: bool = True


@dataclass
class ActionHint:
    """Concrete action sketch; param values may hold {slot} placeholders."""

    kind: ActionKind
    resource_id: str = ""
    class_name: str = ""
    text: str = ""
    params: dict[str, str] = field(default_factory=dict)
    output_slot: str | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "resource_id": self.resource_id,
            "class_name": self.class_name,
            "text": self.text,
            "params": dict(self.params),
            "output_slot": self.output_slot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionHint":
        return cls(
            kind=ActionKind(d["kind"]),
            resource_id=d.get("resource_id", ""),
            class_name=d.get("class_name", ""),
            text=d.get("text", ""),
            params=dict(d.get("params", {})),
            output_slot=d.get("output_slot"),
        )


@dataclass
class TemplateStep:
    index: int
    kind: StepKind
    instruction: str
    slot_refs: list[str] = field(default_factory=list)
    action_hint: ActionHint | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind.value,
            "instruction": self.instruction,
            "slot_refs": list(self.slot_refs),
            "action_hint": self.action_hint.to_dict() if self.action_hint else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TemplateStep":
        return cls(
            index=d["index"],
            kind=StepKind(d["kind"]),
            instruction=d["instruction"],
            slot_refs=list(d.get("slot_refs", [])),
            action_hint=ActionHint.from_dict(d["action_hint"]) if d.get("action_hint") else None,
        )


@dataclass
class SubtaskNode:
    subtask_id: str
    app_id: str
    task: str = ""  # per-subtask instruction, may hold {slot} placeholders
    template_ref: str | None = None
    steps: list[TemplateStep] = field(default_factory=list)  # inline alternative to template_ref
    input_bindings: dict[str, tuple[str, str]] = field(default_factory=dict)  # slot -> (producer, output)
    outputs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "subtask_id": self.subtask_id,
            "app_id": self.app_id,
            "task": self.task,
            "template_ref": self.template_ref,
            "steps": [s.to_dict() for s in self.steps],
            "input_bindings": {k: list(v) for k, v in self.input_bindings.items()},
            "outputs": list(self.outputs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubtaskNode":
        return cls(
            subtask_id=d["subtask_id"],
            app_id=d["app_id"],
            task=d.get("task", ""),
            template_ref=d.get("template_ref"),
            steps=[TemplateStep.from_dict(s) for s in d.get("steps", [])],
            input_bindings={k: (v[0], v[1]) for k, v in d.get("input_bindings", {}).items()},
            outputs=list(d.get("outputs", [])),
        )


@dataclass
class SubtaskDAG:
    nodes: list[SubtaskNode]
    order_edges: list[tuple[str, str]] = field(default_factory=list)

    def edges(self) -> list[tuple[str, str]]:
        """Binding-implied edges plus explicit ordering edges."""
        seen = []
        for node in self.nodes:
            for producer, _ in node.input_bindings.values():
                e = (producer, node.subtask_id)
                if e not in seen:
                    seen.append(e)
        for e in self.order_edges:
            if tuple(e) not in seen:
                seen.append(tuple(e))
        return seen

    def node(self, subtask_id: str) -> SubtaskNode:
        for n in self.nodes:
            if n.subtask_id == subtask_id:
                return n
        raise KeyError(subtask_id)

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "order_edges": [list(e) for e in self.order_edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubtaskDAG":
        return cls(
            nodes=[SubtaskNode.from_dict(n) for n in d["nodes"]],
            order_edges=[(e[0], e[1]) for e in d.get("order_edges", [])],
        )


@dataclass
class ExperienceTemplate:
    id: str
    key_description: str
    level: TemplateLevel
    steps: list[TemplateStep] = field(default_factory=list)
    slots: list[SlotSpec] = field(default_factory=list)
    subtasks: SubtaskDAG | None = None
    app_id: str | None = None  # single-app templates; DAG nodes carry their own

    def slot(self, name: str) -> SlotSpec | None:
        for s in self.slots:
            if s.name == name:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "key_description": self.key_description,
            "level": self.level.value,
            "steps": [s.to_dict() for s in self.steps],
            "slots": [{"name": s.name, "description": s.description, "required": s.required} for s in self.slots],
            "subtasks": self.subtasks.to_dict() if self.subtasks else None,
            "app_id": self.app_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperienceTemplate":
        return cls(
            id=d["id"],
            key_description=d["key_description"],
            level=TemplateLevel(d["level"]),
            steps=[TemplateStep.from_dict(s) for s in d.get("steps", [])],
            slots=[SlotSpec(s["name"], s.get("description", ""), s.get("required", True)) for s in d.get("slots", [])],
            subtasks=SubtaskDAG.from_dict(d["subtasks"]) if d.get("subtasks") else None,
            app_id=d.get("app_id"),
        )


def validate_template(t: ExperienceTemplate) -> None:
    """Raise OracleTemplateInvalid on any structural violation."""
    declared = {s.name for s in t.slots}
    if len(declared) != len(t.slots):
        raise OracleTemplateInvalid(f"{t.id}: duplicate slot names")

    def check_steps(steps: list[TemplateStep], where: str) -> None:
        for step in steps:
            unknown = [s for s in step.slot_refs if s not in declared]
            if unknown:
                raise OracleTemplateInvalid(f"{t.id}:{where} step {step.index} references undeclared slots {unknown}")
            if step.kind is StepKind.INVARIANT and step.slot_refs:
                raise OracleTemplateInvalid(f"{t.id}:{where} invariant step {step.index} references slots")
            if step.kind is StepKind.VARIABLE and not step.slot_refs:
                raise OracleTemplateInvalid(f"{t.id}:{where} variable step {step.index} references no slot")
            if t.level is TemplateLevel.LOW and step.action_hint is None:
                raise OracleTemplateInvalid(f"{t.id}:{where} low-level step {step.index} lacks an action hint")
            if t.level is TemplateLevel.HIGH and step.action_hint is not None:
                raise OracleTemplateInvalid(f"{t.id}:{where} high-level step {step.index} carries an action hint")

    check_steps(t.steps, "steps")
    if t.subtasks is not None:
        ids = [n.subtask_id for n in t.subtasks.nodes]
        if len(set(ids)) != len(ids):
            raise OracleTemplateInvalid(f"{t.id}: duplicate subtask ids")
        by_id = {n.subtask_id: n for n in t.subtasks.nodes}
        for node in t.subtasks.nodes:
            check_steps(node.steps, node.subtask_id)
            for slot, (producer, output) in node.input_bindings.items():
                if producer not in by_id:
                    raise OracleTemplateInvalid(f"{t.id}: binding {slot} names unknown producer {producer}")
                if output not in by_id[producer].outputs:
                    raise OracleTemplateInvalid(f"{t.id}: producer {producer} declares no output {output}")
        try:
            topo_order(t.subtasks)
        except CycleDetected:
            raise OracleTemplateInvalid(f"{t.id}: subtask DAG is cyclic") from None


def topo_order(dag: SubtaskDAG) -> list[str]:
    """Kahn's algorithm, lexicographic among ready nodes; raises CycleDetected."""
    ids = sorted(n.subtask_id for n in dag.nodes)
    indeg = {i: 0 for i in ids}
    out: dict[str, list[str]] = {i: [] for i in ids}
    for a, b in dag.edges():
        if a not in indeg or b not in indeg:
            raise CycleDetected(f"edge ({a}, {b}) names unknown subtask")
        out[a].append(b)
        indeg[b] += 1
    ready = sorted(i for i in ids if indeg[i] == 0)
    order = []
    while ready:
        cur = ready.pop(0)
        order.append(cur)
        for nxt in out[cur]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
        ready.sort()
    if len(order) != len(ids):
        raise CycleDetected("subtask DAG has a cycle")
    return order


@dataclass
class ResolvedStep:
    index: int
    kind: StepKind
    instruction: str
    slot_refs: list[str]
    action_hint: ActionHint | None
    params: dict[str, str] = field(default_factory=dict)  # slot -> value, once known
    consumes: dict[str, tuple[str, str]] = field(default_factory=dict)  # slot -> (producer, output)


@dataclass
class PlannedSubtask:
    subtask_id: str
    app_id: str | None
    task_text: str
    template_id: str | None
    steps: list[ResolvedStep] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    bindings: dict[str, tuple[str, str]] = field(default_factory=dict)


@dataclass
class ExecutablePlan:
    template_id: str | None
    task_text: str
    slot_values: dict[str, str] = field(default_factory=dict)
    subtasks: list[PlannedSubtask] = field(default_factory=list)
    unresolved: list[str] = field(default_factory=list)  # slots awaiting producer outputs
    order_edges: list[tuple[str, str]] = field(default_factory=list)
    profile_context: object | None = None


class TemplateStore:
    """Template persistence plus a cosine index over key descriptions."""

    def __init__(self, root: Path | None = None, embedder: embedding.HashEmbedder | None = None):
        self.root = Path(root) if root else None
        self.embedder = embedder or embedding.HashEmbedder()
        self.templates: dict[str, ExperienceTemplate] = {}
        self.archived: dict[str, ExperienceTemplate] = {}
        self.index = VectorIndex(self.embedder.dim)
        if self.root and self.root.is_dir():
            self.load_dir(self.root)

    def __len__(self) -> int:
        return len(self.templates)

    def load_dir(self, root: Path) -> None:
        for path in sorted(root.glob("*.json")):
            try:
                t = ExperienceTemplate.from_dict(json.loads(path.read_text()))
            except (ValueError, KeyError) as e:
                raise CorruptFile(f"bad template file {path}: {e}") from None
            self.store(t, persist=False)

    def store(self, t: ExperienceTemplate, persist: bool = True) -> str:
        if t.id in self.templates or t.id in self.archived:
            raise DuplicateId(t.id)
        validate_template(t)
        self.templates[t.id] = t
        self.index.set(t.id, self.embedder.embed(t.key_description))
        if persist and self.root:
            self.root.mkdir(parents=True, exist_ok=True)
            (self.root / f"{t.id}.json").write_text(json.dumps(t.to_dict(), indent=1, sort_keys=True))
        return t.id

    def store_revision(self, original_id: str, revised: ExperienceTemplate) -> str:
        """Archive the original and make the revision the retrievable version."""
        if original_id not in self.templates:
            raise KeyError(original_id)
        validate_template(revised)
        self.archived[original_id] = self.templates.pop(original_id)
        self.index.remove(original_id)
        self.templates[revised.id] = revised
        self.index.set(revised.id, self.embedder.embed(revised.key_description))
        if self.root:
            (self.root / f"{revised.id}.json").write_text(json.dumps(revised.to_dict(), indent=1, sort_keys=True))
        return revised.id

    def get(self, template_id: str) -> ExperienceTemplate:
        if template_id in self.templates:
            return self.templates[template_id]
        return self.archived[template_id]

    def retrieve(self, task_text: str, min_similarity: float = 0.6) -> tuple[ExperienceTemplate, float] | None:
        hits = top_k(self.embedder.embed(task_text), self.index, k=1)
        if not hits:
            return None
        tid, score = hits[0]
        if score < min_similarity:
            return None
        return self.templates[tid], score


def retrieve_template(
    task_text: str, store: TemplateStore, min_similarity: float = 0.6
) -> tuple[ExperienceTemplate, float] | None:
    return store.retrieve(task_text, min_similarity)


def store_template(t: ExperienceTemplate, store: TemplateStore) -> str:
    return store.store(t)


def render(text: str, values: dict[str, str]) -> str:
    for name, value in values.items():
        text = text.replace("{" + name + "}", value)
    return text


def _resolve_steps(steps: list[TemplateStep], values: dict[str, str], bindings: dict[str, tuple[str, str]]) -> list[ResolvedStep]:
    resolved = []
    for step in steps:
        hint = step.action_hint
        if hint is not None:
            hint = ActionHint(
                kind=hint.kind,
                resource_id=hint.resource_id,
                class_name=hint.class_name,
                text=hint.text,
                params={k: render(v, values) for k, v in hint.params.items()},
                output_slot=hint.output_slot,
            )
        resolved.append(
            ResolvedStep(
                index=step.index,
                kind=step.kind,
                instruction=render(step.instruction, values),
                slot_refs=list(step.slot_refs),
                action_hint=hint,
                params={s: values[s] for s in step.slot_refs if s in values},
                consumes={s: bindings[s] for s in step.slot_refs if s in bindings},
            )
        )
    return resolved


def fill_parameters(
    template: ExperienceTemplate,
    task_text: str,
    rewriter,
    store: TemplateStore | None = None,
    profile_context: object | None = None,
) -> ExecutablePlan:
    """One rewriter call to fill slots; producer-bound slots stay unresolved."""
    values = dict(rewriter.fill(template, task_text)) if template.slots else {}
    bound: dict[str, tuple[str, str]] = {}
    if template.subtasks:
        for node in template.subtasks.nodes:
            bound.update(node.input_bindings)
    missing = [
        s.name
        for s in template.slots
        if s.required and s.name not in values and s.name not in bound
    ]
    if missing:
        raise MissingRequiredSlot(f"{template.id}: no value or producer for {missing}")
    values = {k: v for k, v in values.items() if k not in bound}

    plan = ExecutablePlan(
        template_id=template.id,
        task_text=task_text,
        slot_values=values,
        unresolved=sorted(bound),
        order_edges=list(template.subtasks.order_edges) if template.subtasks else [],
        profile_context=profile_context,
    )
    if template.subtasks:
        for node in template.subtasks.nodes:
            sub_template = store.get(node.template_ref) if (store and node.template_ref) else None
            steps = sub_template.steps if sub_template else node.steps
            plan.subtasks.append(
                PlannedSubtask(
                    subtask_id=node.subtask_id,
                    app_id=node.app_id,
                    task_text=render(node.task, values) if node.task else task_text,
                    template_id=node.template_ref,
                    steps=_resolve_steps(steps, values, node.input_bindings),
                    outputs=list(node.outputs),
                    bindings=dict(node.input_bindings),
                )
            )
    else:
        plan.subtasks.append(
            PlannedSubtask(
                subtask_id=template.id,
                app_id=template.app_id,
                task_text=task_text,
                template_id=template.id,
                steps=_resolve_steps(template.steps, values, {}),
            )
        )
    return plan


def synthesize_template(
    trace: TraceRecord,
    similar: list[ExperienceTemplate],
    generator,
    store: TemplateStore | None = None,
    references: list[TraceRecord] = (),
) -> ExperienceTemplate:
    """One generator call; the result is validated before it is stored."""
    if trace.outcome is not Outcome.SUCCESS:
        raise ValueError("only successful traces are synthesized")
    template = generator.synthesize(trace, similar, references)
    validate_template(template)
    if store is not None:
        store.store(template)
    return template
