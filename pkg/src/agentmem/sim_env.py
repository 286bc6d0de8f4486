"""Deterministic simulated apps: finite screens, scripted transitions.

Each app is a finite-state machine over element-tree screens. Transitions are
keyed by (screen, action kind, target resource id), carry virtual durations in
milliseconds, and may set context variables (e.g. the typed search item) or
emit named outputs resolved from the app's data tables. Identical action
sequences from reset always produce identical state sequences.
"""

from __future__ import annotations

import copy
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from .config import fixtures_root
from .errors import CorruptFile, MissingFixture, NoTransition, UnknownCategory, UnknownTarget
from .ui_model import Action, ActionKind, UIElement, UIState

END_SCREEN = "__end__"
LAUNCHER_APP = "launcher"

_PLACEHOLDER = re.compile(r"\{([a-z]+:[^}]*)\}")


@dataclass
class TransitionSpec:
    screen: str
    kind: ActionKind
    target: str | None
    to: str
    duration_ms: int
    sets: dict[str, str] = field(default_factory=dict)  # context var -> "$text" | literal
    emits: list[dict] = field(default_factory=list)  # {slot, source}


@dataclass
class SimApp:
    app_id: str
    launch_screen: str
    screens: dict[str, UIElement]  # templates; bounds assigned at render
    transitions: list[TransitionSpec]
    data: dict = field(default_factory=dict)
    operator_rules: list[dict] = field(default_factory=list)
    launch_duration_ms: int = 1000
    done_duration_ms: int = 0

    def transition(self, screen: str, kind: ActionKind, target: str | None) -> TransitionSpec | None:
        for t in self.transitions:
            if t.screen == screen and t.kind == kind and t.target == target:
                return t
        return None

    def validate(self) -> None:
        if self.launch_screen not in self.screens:
            raise CorruptFile(f"{self.app_id}: launch screen {self.launch_screen} undeclared")
        reachable = {self.launch_screen}
        frontier = [self.launch_screen]
        while frontier:
            cur = frontier.pop()
            for t in self.transitions:
                if t.screen == cur and t.to in self.screens and t.to not in reachable:
                    reachable.add(t.to)
                    frontier.append(t.to)
        unreachable = set(self.screens) - reachable
        if unreachable:
            raise CorruptFile(f"{self.app_id}: unreachable screens {sorted(unreachable)}")
        for t in self.transitions:
            if t.screen not in self.screens or (t.to not in self.screens and t.to != END_SCREEN):
                raise CorruptFile(f"{self.app_id}: transition references unknown screen {t.screen}->{t.to}")


def load_app(path: Path) -> SimApp:
    try:
        doc = json.loads(Path(path).read_text())
        screens = {sid: UIElement.from_dict(spec) for sid, spec in doc["screens"].items()}
        transitions = [
            TransitionSpec(
                screen=t["screen"],
                kind=ActionKind(t["kind"]),
                target=t.get("target"),
                to=t["to"],
                duration_ms=t["duration_ms"],
                sets=dict(t.get("sets", {})),
                emits=list(t.get("emits", [])),
            )
            for t in doc["transitions"]
        ]
        app = SimApp(
            app_id=doc["app_id"],
            launch_screen=doc["launch_screen"],
            screens=screens,
            transitions=transitions,
            data=dict(doc.get("data", {})),
            operator_rules=list(doc.get("operator_rules", [])),
            launch_duration_ms=doc.get("launch_duration_ms", 1000),
            done_duration_ms=doc.get("done_duration_ms", 0),
        )
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptFile(f"bad app spec {path}: {e}") from None
    app.validate()
    return app


def load_apps(root: Path | None = None) -> dict[str, SimApp]:
    root = Path(root) if root else fixtures_root() / "apps"
    if not root.is_dir():
        raise MissingFixture(f"no app fixtures under {root}")
    apps = {}
    for path in sorted(root.glob("*.json")):
        app = load_app(path)
        apps[app.app_id] = app
    return apps


def _end_screen(app_id: str) -> UIElement:
    return UIElement(
        resource_id="end_root",
        class_name="Frame",
        children=[UIElement(resource_id="session_done", class_name="TextView", text="session finished")],
    )


def _launcher_screen() -> UIElement:
    return UIElement(
        resource_id="launcher_root",
        class_name="Frame",
        children=[UIElement(resource_id="app_grid", class_name="Grid", text="apps")],
    )


def _assign_bounds(el: UIElement, box: tuple[int, int, int, int]) -> None:
    el.bounds = box
    n = len(el.children)
    if n == 0:
        return
    left, top, right, bottom = box
    slice_h = max((bottom - top) // n, 1)
    for i, child in enumerate(el.children):
        child_top = top + i * slice_h
        child_bottom = min(child_top + slice_h, bottom)
        if child_bottom <= child_top:
            child_bottom = child_top  # degenerate but still contained
        _assign_bounds(child, (left, child_top, right, child_bottom))


def _resolve_source(source: str, app: SimApp, context: dict[str, str]) -> str:
    if source.startswith("lit:"):
        return source[4:]
    if source.startswith("ctx:"):
        return context.get(source[4:], "")
    if source.startswith("lookup:"):
        _, table, key_var = source.split(":", 2)
        table_data = app.data.get(table, {})
        key = context.get(key_var, "").lower()
        return str(table_data.get(key, table_data.get("*", "")))
    return source


class AppInstance:
    """Runtime cursor of one app: current screen plus typed-value context."""

    def __init__(self, app: SimApp):
        self.app = app
        self.screen = app.launch_screen
        self.context: dict[str, str] = {}

    def render(self) -> UIState:
        if self.screen == END_SCREEN:
            template = _end_screen(self.app.app_id)
        else:
            template = copy.deepcopy(self.app.screens[self.screen])
        self._fill_text(template)
        _assign_bounds(template, (0, 0, 1080, 1920))
        return UIState(app_id=self.app.app_id, screen_id=self.screen, root=template)

    def _fill_text(self, el: UIElement) -> None:
        if "{" in el.text:
            el.text = _PLACEHOLDER.sub(lambda m: _resolve_source(m.group(1), self.app, self.context), el.text)
        for child in el.children:
            self._fill_text(child)


class SimEnvironment:
    """Owns per-app instances and the shared launcher screen."""

    def __init__(self, apps: dict[str, SimApp]):
        self.apps = apps
        self.instances: dict[str, AppInstance] = {}

    def reset(self) -> UIState:
        self.instances = {}
        return self.launcher_state()

    def launcher_state(self) -> UIState:
        root = _launcher_screen()
        _assign_bounds(root, (0, 0, 1080, 1920))
        return UIState(app_id=LAUNCHER_APP, screen_id="home", root=root)

    def instance(self, app_id: str) -> AppInstance:
        if app_id not in self.apps:
            raise NoTransition(f"unknown app {app_id}")
        if app_id not in self.instances:
            self.instances[app_id] = AppInstance(self.apps[app_id])
        return self.instances[app_id]

    def cursor(self) -> "EnvCursor":
        return EnvCursor(self)


class EnvCursor:
    """One executor's view: which app it is focused on right now."""

    def __init__(self, env: SimEnvironment):
        self.env = env
        self.current_app: str | None = None

    def state(self) -> UIState:
        if self.current_app is None:
            return self.env.launcher_state()
        return self.env.instance(self.current_app).render()

    def step(self, action: Action) -> tuple[UIState, dict[str, str], int]:
        """Apply one action; returns (next state, emitted outputs, duration ms)."""
        if action.kind is ActionKind.LAUNCH:
            app_id = action.params.get("app_id", "")
            if app_id not in self.env.apps:
                raise NoTransition(f"cannot launch unknown app {app_id!r}")
            instance = self.env.instance(app_id)
            instance.screen = instance.app.launch_screen
            instance.context.clear()  # launching starts the app fresh
            self.current_app = app_id
            return instance.render(), {}, instance.app.launch_duration_ms

        if self.current_app is None:
            raise NoTransition(f"{action.kind.value} outside any app")
        instance = self.env.instance(self.current_app)
        app = instance.app

        if action.kind is ActionKind.DONE:
            instance.screen = END_SCREEN
            return instance.render(), {}, app.done_duration_ms

        target_rid = action.target.resource_id if action.target else None
        if action.target is not None:
            live = instance.render()
            if not any(el.resource_id == target_rid for el, _ in live.root.walk()):
                raise NoTransition(f"{app.app_id}/{instance.screen}: no element {target_rid!r} on screen")
        spec = app.transition(instance.screen, action.kind, target_rid)
        if spec is None:
            raise NoTransition(f"{app.app_id}/{instance.screen}: no transition for {action.kind.value} on {target_rid!r}")
        for var, rule in spec.sets.items():
            instance.context[var] = action.params.get("text", "") if rule == "$text" else rule
        outputs = {e["slot"]: _resolve_source(e["source"], app, instance.context) for e in spec.emits}
        instance.screen = spec.to
        return instance.render(), outputs, spec.duration_ms


def step_env(cursor: EnvCursor, action: Action) -> tuple[UIState, dict[str, str], int]:
    return cursor.step(action)


# -- fault injection -----------------------------------------------------------


def _find_parent_and_node(root: UIElement, rid: str) -> tuple[UIElement | None, UIElement] | None:
    if root.resource_id == rid:
        return None, root
    for el, _ in root.walk():
        for child in el.children:
            if child.resource_id == rid:
                return el, child
    return None


def mutate_ui(app: SimApp, mutation: str, screen_id: str, target_rid: str, **kw) -> None:
    """Mutate one screen template in place; other screens are untouched."""
    if screen_id not in app.screens:
        raise UnknownTarget(f"{app.app_id}: unknown screen {screen_id}")
    root = app.screens[screen_id]
    found = _find_parent_and_node(root, target_rid)
    if found is None:
        raise UnknownTarget(f"{app.app_id}/{screen_id}: no element {target_rid!r}")
    parent, node = found
    if mutation == "rename_text":
        node.text = kw.get("new_text", node.text)
    elif mutation == "remove_element":
        if parent is None:
            raise UnknownTarget("cannot remove the screen root")
        parent.children.remove(node)
    elif mutation == "move_element":
        new_parent_rid = kw.get("new_parent", "")
        dest = _find_parent_and_node(root, new_parent_rid)
        if parent is None or dest is None or dest[1] is node:
            raise UnknownTarget(f"bad move target {new_parent_rid!r}")
        parent.children.remove(node)
        dest[1].children.append(node)
    elif mutation == "reorder_children":
        node.children.reverse()
    else:
        raise ValueError(f"unknown mutation {mutation!r}")


# -- workload and scenario generation -------------------------------------------


@dataclass
class TaskInstance:
    category: str
    task_text: str
    app_id: str
    params: dict[str, str]
    template_key: str = ""


def _render_params(template: str, params: dict[str, str]) -> str:
    for k, v in params.items():
        template = template.replace("{" + k + "}", v)
    return template


def load_workload_categories(root: Path | None = None) -> dict:
    path = (Path(root) if root else fixtures_root()) / "workloads" / "categories.json"
    if not path.is_file():
        raise MissingFixture(str(path))
    return json.loads(path.read_text())


def generate_workload(category: str, count: int, seed: int, categories: dict | None = None) -> list[TaskInstance]:
    """Seeded parameterized task instances for one category."""
    categories = categories or load_workload_categories()
    if category not in categories:
        raise UnknownCategory(category)
    spec = categories[category]
    rng = random.Random(f"{category}:{seed}")
    out = []
    for _ in range(count):
        params = {name: rng.choice(values) for name, values in sorted(spec["params"].items())}
        out.append(
            TaskInstance(
                category=category,
                task_text=_render_params(spec["task_template"], params),
                app_id=spec["app_id"],
                params=params,
                template_key=spec.get("template_key", ""),
            )
        )
    return out


@dataclass
class Scenario:
    name: str
    template_id: str
    task_template: str
    params: dict[str, list[str]]
    instances: int
    seed: int
    interrupts: list[dict] = field(default_factory=list)
    mutations: list[dict] = field(default_factory=list)
    expected: dict[str, int] = field(default_factory=dict)

    def instantiate(self) -> list[dict[str, str]]:
        rng = random.Random(f"{self.name}:{self.seed}")
        return [
            {name: rng.choice(values) for name, values in sorted(self.params.items())}
            for _ in range(self.instances)
        ]


def load_scenario(path: Path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
        return Scenario(
            name=doc["name"],
            template_id=doc["template_id"],
            task_template=doc["task_template"],
            params={k: list(v) for k, v in doc.get("params", {}).items()},
            instances=doc.get("instances", 1),
            seed=doc.get("seed", 0),
            interrupts=list(doc.get("interrupts", [])),
            mutations=list(doc.get("mutations", [])),
            expected=dict(doc.get("expected", {})),
        )
    except (ValueError, KeyError) as e:
        raise CorruptFile(f"bad scenario file {path}: {e}") from None


def load_scenarios(root: Path | None = None) -> list[Scenario]:
    root = Path(root) if root else fixtures_root() / "scenarios"
    if not root.is_dir():
        raise MissingFixture(f"no scenario fixtures under {root}")
    return [load_scenario(p) for p in sorted(root.glob("*.json"))]


def make_chain_app(app_id: str, step_durations: list[int], emit_slot: str | None = None, launch_ms: int = 500) -> SimApp:
    """Programmatic linear app: N click screens, optional trailing emit.

    Used by randomized scheduling scenarios where hand-authored fixtures would
    add nothing; every screen has a unique marker so fingerprints stay distinct.
    """
    screens: dict[str, UIElement] = {}
    transitions: list[TransitionSpec] = []
    n = len(step_durations)
    for i in range(n + 1):
        screens[f"s{i}"] = UIElement(
            resource_id=f"{app_id}_s{i}",
            class_name="Frame",
            children=[
                UIElement(resource_id=f"{app_id}_marker_{i}", class_name="TextView", text=f"screen {i}"),
                UIElement(resource_id=f"next_{i}", class_name="Button", text="next"),
                UIElement(resource_id=f"input_{i}", class_name="EditText", text=""),
            ],
        )
    for i, dur in enumerate(step_durations):
        transitions.append(TransitionSpec(f"s{i}", ActionKind.CLICK, f"next_{i}", f"s{i + 1}", dur))
        transitions.append(
            TransitionSpec(f"s{i}", ActionKind.TYPE_TEXT, f"input_{i}", f"s{i + 1}", dur, sets={"typed": "$text"})
        )
    if emit_slot:
        transitions.append(
            TransitionSpec(
                f"s{n}",
                ActionKind.EMIT_OUTPUT,
                None,
                f"s{n}_done",
                10,
                emits=[{"slot": emit_slot, "source": f"lit:{app_id}-out"}],
            )
        )
        screens[f"s{n}_done"] = UIElement(
            resource_id=f"{app_id}_s{n}_done",
            class_name="Frame",
            children=[UIElement(resource_id=f"{app_id}_done_marker", class_name="TextView", text="emitted")],
        )
    app = SimApp(
        app_id=app_id,
        launch_screen="s0",
        screens=screens,
        transitions=transitions,
        launch_duration_ms=launch_ms,
    )
    app.validate()
    return app
