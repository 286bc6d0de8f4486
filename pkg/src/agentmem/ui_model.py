"""Simulated GUI vocabulary: element trees, screens, actions, traces.

Screen identity (the fingerprint) covers the app id plus the pre-order tree of
(resource_id, class_name) pairs. Free text and bounds are deliberately left
out so dynamic content does not fragment cached state; text drift is caught
per action by the fuzzy element matcher instead.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

from .errors import CorruptFile

_WS = re.compile(r"\s+")


class ActionKind(str, Enum):
    LAUNCH = "launch"
    CLICK = "click"
    TYPE_TEXT = "type_text"
    SWIPE = "swipe"
    BACK = "back"
    DONE = "done"
    EMIT_OUTPUT = "emit_output"


class StepOrigin(str, Enum):
    ORACLE = "oracle"
    ACTTREE_REUSE = "acttree_reuse"
    ACTCHAIN_REUSE = "actchain_reuse"
    USER_CORRECTION = "user_correction"


class Outcome(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    INTERRUPTED = "interrupted"


@dataclass
class UIElement:
    resource_id: str
    class_name: str
    text: str = ""
    bounds: tuple[int, int, int, int] = (0, 0, 0, 0)  # left, top, right, bottom
    children: list["UIElement"] = field(default_factory=list)

    def walk(self, path: tuple[int, ...] = ()) -> Iterator[tuple["UIElement", tuple[int, ...]]]:
        """Pre-order traversal yielding (element, path-from-root)."""
        yield self, path
        for i, child in enumerate(self.children):
            yield from child.walk(path + (i,))

    def at_path(self, path: tuple[int, ...]) -> "UIElement":
        el = self
        for i in path:
            el = el.children[i]
        return el

    def to_dict(self) -> dict:
        return {
            "resource_id": self.resource_id,
            "class_name": self.class_name,
            "text": self.text,
            "bounds": list(self.bounds),
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UIElement":
        return cls(
            resource_id=d["resource_id"],
            class_name=d["class_name"],
            text=d.get("text", ""),
            bounds=tuple(d.get("bounds", (0, 0, 0, 0))),
            children=[cls.from_dict(c) for c in d.get("children", [])],
        )


@dataclass
class UIState:
    app_id: str
    screen_id: str
    root: UIElement
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = fingerprint(self)

    def to_dict(self) -> dict:
        return {
            "app_id": self.app_id,
            "screen_id": self.screen_id,
            "root": self.root.to_dict(),
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UIState":
        return cls(
            app_id=d["app_id"],
            screen_id=d["screen_id"],
            root=UIElement.from_dict(d["root"]),
            fingerprint=d.get("fingerprint", ""),
        )


def fingerprint(state: UIState) -> str:
    """Digest of app id + structural (resource_id, class_name) tree, pre-order.

    Text and bounds are excluded by definition; tree shape is captured with
    explicit open/close markers so sibling/child moves change the digest.
    """
    h = hashlib.sha256()
    h.update(state.app_id.encode())
    stack: list[object] = [state.root]
    while stack:
        node = stack.pop()
        if node is None:
            h.update(b")")
            continue
        h.update(b"(")
        h.update(node.resource_id.encode())
        h.update(b"\x1f")
        h.update(node.class_name.encode())
        stack.append(None)
        for child in reversed(node.children):
            stack.append(child)
    return h.hexdigest()[:16]


@dataclass
class ElementSelector:
    """Snapshot of a target element: identity fields plus path-from-root."""

    resource_id: str = ""
    class_name: str = ""
    text: str = ""
    path: tuple[int, ...] = ()

    @classmethod
    def of(cls, element: UIElement, path: tuple[int, ...]) -> "ElementSelector":
        return cls(element.resource_id, element.class_name, element.text, path)

    def to_dict(self) -> dict:
        return {
            "resource_id": self.resource_id,
            "class_name": self.class_name,
            "text": self.text,
            "path": list(self.path),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElementSelector":
        return cls(d["resource_id"], d["class_name"], d.get("text", ""), tuple(d.get("path", ())))


@dataclass
class Action:
    kind: ActionKind
    target: ElementSelector | None = None
    params: dict[str, str] = field(default_factory=dict)
    output_slot: str | None = None

    def identity(self) -> tuple:
        """Merge identity: text snapshot excluded so verified rebinds still match."""
        tgt = (self.target.resource_id, self.target.class_name, self.target.path) if self.target else None
        return (self.kind.value, tgt, tuple(sorted(self.params.items())), self.output_slot)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "target": self.target.to_dict() if self.target else None,
            "params": dict(self.params),
            "output_slot": self.output_slot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Action":
        return cls(
            kind=ActionKind(d["kind"]),
            target=ElementSelector.from_dict(d["target"]) if d.get("target") else None,
            params=dict(d.get("params", {})),
            output_slot=d.get("output_slot"),
        )


@dataclass
class TraceRecord:
    task_text: str
    steps: list[tuple[UIState, Action]]
    outcome: Outcome
    annotations: list[StepOrigin]

    def to_dict(self) -> dict:
        return {
            "task_text": self.task_text,
            "steps": [[s.to_dict(), a.to_dict()] for s, a in self.steps],
            "outcome": self.outcome.value,
            "annotations": [o.value for o in self.annotations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceRecord":
        return cls(
            task_text=d["task_text"],
            steps=[(UIState.from_dict(s), Action.from_dict(a)) for s, a in d["steps"]],
            outcome=Outcome(d["outcome"]),
            annotations=[StepOrigin(o) for o in d["annotations"]],
        )


def save_trace(trace: TraceRecord, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trace.to_dict(), indent=1, sort_keys=True))


def load_trace(path: Path) -> TraceRecord:
    try:
        data = json.loads(Path(path).read_text())
        return TraceRecord.from_dict(data)
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptFile(f"bad trace file {path}: {e}") from None


def normalize_text(text: str) -> str:
    """Case-fold and collapse whitespace before string comparison."""
    return _WS.sub(" ", text.casefold()).strip()


def levenshtein(a: str, b: str) -> int:
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def text_similarity(a: str, b: str) -> float:
    """1 - normalized edit distance over case-folded, whitespace-collapsed text."""
    a, b = normalize_text(a), normalize_text(b)
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


@dataclass
class Match:
    element: UIElement
    path: tuple[int, ...]
    score: float


def fuzzy_match(
    selector: ElementSelector,
    state: UIState,
    weights: tuple[float, float, float] = (0.5, 0.2, 0.3),
    threshold: float = 0.8,
) -> Match | None:
    """Best-scoring live element for a cached selector, or None below threshold.

    Score = w_rid * [resource_id equal] + w_cls * [class_name equal]
          + w_text * text_similarity. Ties go to the earliest pre-order element.
    """
    if not (selector.resource_id or selector.class_name or selector.text):
        raise ValueError("selector has no usable fields")
    w_rid, w_cls, w_text = weights
    best: Match | None = None
    for element, path in state.root.walk():
        score = (
            w_rid * (element.resource_id == selector.resource_id)
            + w_cls * (element.class_name == selector.class_name)
            + w_text * text_similarity(element.text, selector.text)
        )
        if best is None or score > best.score:
            best = Match(element, path, score)
    if best is not None and best.score >= threshold:
        return best
    return None


def token_count(text: str) -> int:
    """Whitespace token count used for context budgeting."""
    return len(text.split())
