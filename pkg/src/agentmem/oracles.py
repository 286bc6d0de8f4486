"""The five model roles behind deterministic scripted implementations.

Every call is counted in a shared log so tests can assert where model calls
do (and do not) happen. The scripted mocks are pure functions of their inputs
plus a fixture rulebook; swapping in live models means implementing the same
method signatures.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .embedding import tokenize
from .errors import MissingFixture, OperatorFailed
from .experience_memory import (
    ActionHint,
    ExperienceTemplate,
    SlotSpec,
    StepKind,
    TemplateLevel,
    TemplateStep,
)
from .profile_memory import ChangeSet
from .ui_model import Action, ActionKind, ElementSelector, StepOrigin, TraceRecord, UIState

ROLES = ("profile_updater", "experience_generator", "task_rewriter", "operator", "judge")


class CallLog:
    """Append-only per-role call record."""

    def __init__(self):
        self.calls: list[tuple[str, object]] = []

    def record(self, role: str, request: object, response: object) -> None:
        self.calls.append((role, (request, response)))

    def count(self, role: str | None = None) -> int:
        if role is None:
            return len(self.calls)
        return sum(1 for r, _ in self.calls if r == role)

    def snapshot(self) -> dict[str, int]:
        return {role: self.count(role) for role in ROLES}


class OracleBase:
    def __init__(self, log: CallLog | None = None):
        self.log = log or CallLog()

    def _record(self, role: str, request: object, response: object) -> None:
        self.log.record(role, request, response)


class ScriptedProfileUpdater(OracleBase):
    """Rulebook-driven updater: regex per observation -> ChangeSet fragments."""

    def __init__(self, rulebook: dict | None = None, log: CallLog | None = None):
        super().__init__(log)
        rulebook = rulebook or {"rules": [], "splits": {}}
        self.rules = [(re.compile(r["pattern"], re.IGNORECASE), r["changeset"]) for r in rulebook.get("rules", [])]
        self.splits = rulebook.get("splits", {})

    @classmethod
    def from_file(cls, path: Path, log: CallLog | None = None) -> "ScriptedProfileUpdater":
        path = Path(path)
        if not path.is_file():
            raise MissingFixture(str(path))
        return cls(json.loads(path.read_text()), log)

    def propose(self, context_nodes: list[dict], context_edges: list, observations: list[str]) -> ChangeSet:
        merged = ChangeSet()
        for obs in observations:
            for pattern, fragment in self.rules:
                if pattern.search(obs):
                    cs = ChangeSet.from_dict(fragment)
                    merged.concept_insertions.extend(cs.concept_insertions)
                    merged.entity_insertions.extend(cs.entity_insertions)
                    for node_id, patch in cs.entity_updates.items():
                        merged.entity_updates.setdefault(node_id, {}).update(patch)
                    merged.new_edges.extend(cs.new_edges)
                    break
        self._record("profile_updater", observations, merged)
        return merged

    def propose_split(self, concept: dict, entities: list[dict]) -> dict:
        spec = self.splits.get(concept["id"], None)
        if spec is None:
            proposal = {"subconcepts": [], "assignment": {}}
        else:
            assign_key = spec.get("assign_by_attribute", {})
            key = assign_key.get("key", "")
            value_map = assign_key.get("value_map", {})
            default = assign_key.get("default")
            assignment = {}
            for ent in entities:
                value = ent.get("attributes", {}).get(key, "")
                assignment[ent["id"]] = value_map.get(value, default)
            proposal = {"subconcepts": spec.get("subconcepts", []), "assignment": assignment}
        self._record("profile_updater", concept["id"], proposal)
        return proposal


@dataclass
class OperatorRule:
    task_pattern: re.Pattern
    screen: str
    action: dict  # {kind, target?, params?, output_slot?}


class ScriptedOperator(OracleBase):
    """Golden-path operator: (task pattern, current screen) -> next action.

    The capability knob caps how deep the bare oracle can act without a
    concrete hint, modelling weaker models; a usable hint always bypasses it.
    """

    def __init__(self, rules_by_app: dict[str, list[dict]], log: CallLog | None = None, max_depth: int | None = None):
        super().__init__(log)
        self.max_depth = max_depth
        self.rules: dict[str, list[OperatorRule]] = {}
        for app_id, rules in rules_by_app.items():
            self.rules[app_id] = [
                OperatorRule(re.compile(r["task_pattern"], re.IGNORECASE), r["screen"], r["action"]) for r in rules
            ]

    @classmethod
    def for_env(cls, env, log: CallLog | None = None, max_depth: int | None = None) -> "ScriptedOperator":
        return cls({app_id: app.operator_rules for app_id, app in env.apps.items()}, log, max_depth)

    def _bind(self, spec: dict, state: UIState, values: dict[str, str]) -> Action | None:
        kind = ActionKind(spec["kind"])
        params = {k: _render(v, values) for k, v in spec.get("params", {}).items()}
        target = None
        if spec.get("target"):
            found = _find_by_rid(state, spec["target"])
            if found is None:
                return None
            element, path = found
            target = ElementSelector.of(element, path)
        return Action(kind=kind, target=target, params=params, output_slot=spec.get("output_slot"))

    def next_action(
        self,
        task: str,
        state: UIState,
        history: list,
        hint: ActionHint | None = None,
        slot_values: dict[str, str] | None = None,
    ) -> Action:
        values = dict(slot_values or {})
        if hint is not None:
            action = self._bind(
                {
                    "kind": hint.kind.value,
                    "target": hint.resource_id or None,
                    "params": hint.params,
                    "output_slot": hint.output_slot,
                },
                state,
                values,
            )
            if action is not None:
                self._record("operator", (task, state.screen_id, "hint"), action)
                return action
        if self.max_depth is not None and len(history) > self.max_depth:
            self._record("operator", (task, state.screen_id), "failed:depth")
            raise OperatorFailed(f"depth {len(history)} exceeds capability {self.max_depth} and no usable hint")
        candidates = []
        if state.app_id == "launcher":
            for app_id in sorted(self.rules):
                candidates.extend(r for r in self.rules[app_id] if r.screen == "__launcher__")
        else:
            candidates = [r for r in self.rules.get(state.app_id, []) if r.screen == state.screen_id]
        for rule in candidates:
            m = rule.task_pattern.search(task)
            if not m:
                continue
            values.update({k: v for k, v in m.groupdict().items() if v})
            action = self._bind(rule.action, state, values)
            if action is not None:
                self._record("operator", (task, state.screen_id), action)
                return action
        self._record("operator", (task, state.screen_id), "failed:no-rule")
        raise OperatorFailed(f"no golden-path rule for {task!r} on {state.app_id}/{state.screen_id}")


class ScriptedTaskRewriter(OracleBase):
    """Slot filling by vocabulary/regex extraction; rewriting by appending context."""

    def __init__(self, extractors: dict[str, list[str]] | None = None, log: CallLog | None = None):
        super().__init__(log)
        # slot name -> regex patterns with one capture group, tried in order
        self.extractors = {k: [re.compile(p, re.IGNORECASE) for p in v] for k, v in (extractors or {}).items()}

    def fill(self, template: ExperienceTemplate, task_text: str) -> dict[str, str]:
        values: dict[str, str] = {}
        for slot in template.slots:
            for pattern in self.extractors.get(slot.name, []):
                m = pattern.search(task_text)
                if m:
                    values[slot.name] = m.group(1).strip()
                    break
        self._record("task_rewriter", (template.id, task_text), values)
        return values

    def rewrite(self, task_text: str, context_text: str) -> str:
        rewritten = task_text if not context_text else f"{task_text} (given: {context_text})"
        self._record("task_rewriter", task_text, rewritten)
        return rewritten


class ScriptedExperienceGenerator(OracleBase):
    """Synthesis by diffing parameter values across traces of one task family."""

    def __init__(self, log: CallLog | None = None):
        super().__init__(log)
        self.counter = 0

    def synthesize(
        self, trace: TraceRecord, similar: list[ExperienceTemplate], references: list[TraceRecord] = ()
    ) -> ExperienceTemplate:
        self.counter += 1
        steps: list[TemplateStep] = []
        slots: list[SlotSpec] = []
        comparable = [r for r in references if len(r.steps) == len(trace.steps)]
        for i, (state, action) in enumerate(trace.steps):
            varying_keys = sorted(
                {
                    key
                    for ref in comparable
                    for key in action.params
                    if ref.steps[i][1].params.get(key) != action.params.get(key)
                }
            )
            hint = ActionHint(
                kind=action.kind,
                resource_id=action.target.resource_id if action.target else "",
                class_name=action.target.class_name if action.target else "",
                text=action.target.text if action.target else "",
                params=dict(action.params),
                output_slot=action.output_slot,
            )
            if varying_keys:
                refs = []
                for key in varying_keys:
                    slot_name = f"{key}_{i}"
                    slots.append(SlotSpec(slot_name, description=f"value typed at step {i}"))
                    hint.params[key] = "{" + slot_name + "}"
                    refs.append(slot_name)
                steps.append(TemplateStep(i, StepKind.VARIABLE, f"step {i}: {action.kind.value}", refs, hint))
            else:
                steps.append(TemplateStep(i, StepKind.INVARIANT, f"step {i}: {action.kind.value}", [], hint))
        app_id = next((s.app_id for s, _ in trace.steps if s.app_id != "launcher"), None)
        template = ExperienceTemplate(
            id=f"synth-{self.counter:04d}",
            key_description=trace.task_text,
            level=TemplateLevel.LOW,
            steps=steps,
            slots=slots,
            app_id=app_id,
        )
        self._record("experience_generator", trace.task_text, template.id)
        return template

    def refine(self, template: ExperienceTemplate, trace: TraceRecord) -> ExperienceTemplate:
        """Replace the first deviating step with the user's corrective action."""
        first = next(
            (i for i, origin in enumerate(trace.annotations) if origin is StepOrigin.USER_CORRECTION), None
        )
        if first is None:
            raise ValueError("trace carries no user corrections")
        _, corrective = trace.steps[first]
        revised = ExperienceTemplate.from_dict(template.to_dict())
        revised.id = _bump_version(template.id)
        target_index = min(first, len(revised.steps) - 1)
        step = revised.steps[target_index]
        rid = corrective.target.resource_id if corrective.target else ""
        step.instruction = f"{corrective.kind.value} {rid}".strip()
        step.kind = StepKind.INVARIANT
        step.slot_refs = []
        new_value = corrective.params.get("text")
        if new_value is not None:
            slot_name = f"correction_{target_index}"
            revised.slots.append(SlotSpec(slot_name, description="value introduced by a user correction"))
            step.kind = StepKind.VARIABLE
            step.slot_refs = [slot_name]
        if revised.level is TemplateLevel.LOW:
            step.action_hint = ActionHint(
                kind=corrective.kind,
                resource_id=rid,
                class_name=corrective.target.class_name if corrective.target else "",
                text=corrective.target.text if corrective.target else "",
                params={k: v for k, v in corrective.params.items() if k != "text"}
                | ({"text": "{" + f"correction_{target_index}" + "}"} if new_value is not None else {}),
                output_slot=corrective.output_slot,
            )
        self._record("experience_generator", (template.id, "refine"), revised.id)
        return revised


class ScriptedJudge(OracleBase):
    """Token-containment check of required profile elements in rewritten text."""

    def check(self, required: dict[str, str], rewritten_task: str) -> list[dict]:
        have = set(tokenize(rewritten_task))
        result = []
        for element, expected in sorted(required.items()):
            need = tokenize(expected)
            matched = bool(need) and all(tok in have for tok in need)
            result.append(
                {
                    "profile_element": element,
                    "expected_value": expected,
                    "matched": matched,
                    "evidence": " ".join(tok for tok in need if tok in have) if matched else "",
                }
            )
        self._record("judge", (required, rewritten_task), result)
        return result


@dataclass
class OracleSuite:
    profile_updater: ScriptedProfileUpdater
    experience_generator: ScriptedExperienceGenerator
    task_rewriter: ScriptedTaskRewriter
    operator: ScriptedOperator
    judge: ScriptedJudge
    log: CallLog = field(default_factory=CallLog)

    @classmethod
    def scripted(
        cls,
        env=None,
        rulebook: dict | None = None,
        extractors: dict | None = None,
        operator_depth: int | None = None,
    ) -> "OracleSuite":
        log = CallLog()
        rules_by_app = {app_id: app.operator_rules for app_id, app in env.apps.items()} if env else {}
        return cls(
            profile_updater=ScriptedProfileUpdater(rulebook, log),
            experience_generator=ScriptedExperienceGenerator(log),
            task_rewriter=ScriptedTaskRewriter(extractors, log),
            operator=ScriptedOperator(rules_by_app, log, operator_depth),
            judge=ScriptedJudge(log),
            log=log,
        )


def _render(text: str, values: dict[str, str]) -> str:
    for name, value in values.items():
        text = text.replace("{" + name + "}", value)
    return text


def _find_by_rid(state: UIState, resource_id: str):
    for element, path in state.root.walk():
        if element.resource_id == resource_id:
            return element, path
    return None


def _bump_version(template_id: str) -> str:
    m = re.match(r"^(.*)\.v(\d+)$", template_id)
    if m:
        return f"{m.group(1)}.v{int(m.group(2)) + 1}"
    return f"{template_id}.v2"
