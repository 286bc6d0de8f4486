"""Fine-grained action reuse caches.

ActTree: one per app, keyed by UI-state fingerprints, aggregating every
recorded trace so tasks can replay shared prefixes. The reuse bar rises with
tree depth: threshold(depth) = tau0 + tau_step * depth, capped, so deeper
(riskier) reuse needs closer task similarity.

ActChain: one per experience template, mapping each template step to cached
action variants keyed by parameter values. Invariant steps replay directly;
variable steps replay only on exact parameter match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import embedding
from .errors import CorruptFile
from .experience_memory import StepKind
from .ui_model import Action, Match, StepOrigin, TraceRecord, UIState, fuzzy_match


@dataclass
class ActTreeEdge:
    action: Action
    child: str  # child state fingerprint
    task_list: list[str] = field(default_factory=list)
    task_embeddings: list[np.ndarray] = field(default_factory=list)


@dataclass
class ActTreeNode:
    summary: str  # "app/screen" label, diagnostic only
    edges: list[ActTreeEdge] = field(default_factory=list)


@dataclass
class ActTree:
    app_id: str
    root: str | None = None  # fingerprint of the state the app is launched from
    nodes: dict[str, ActTreeNode] = field(default_factory=dict)

    def node(self, fp: str) -> ActTreeNode | None:
        return self.nodes.get(fp)

    def edge_count(self) -> int:
        return sum(len(n.edges) for n in self.nodes.values())

    def find_edge(self, fp: str, action: Action) -> ActTreeEdge | None:
        node = self.nodes.get(fp)
        if node is None:
            return None
        ident = action.identity()
        for edge in node.edges:
            if edge.action.identity() == ident:
                return edge
        return None

    def prune_unreachable(self) -> None:
        if self.root is None:
            return
        live = set()
        stack = [self.root]
        while stack:
            fp = stack.pop()
            if fp in live or fp not in self.nodes:
                continue
            live.add(fp)
            stack.extend(e.child for e in self.nodes[fp].edges)
        self.nodes = {fp: n for fp, n in self.nodes.items() if fp in live}


class Verdict(str, Enum):
    REUSE = "reuse"
    MISS = "miss"


@dataclass
class ReuseDecision:
    verdict: Verdict
    action: Action | None
    depth: int
    similarity: float
    threshold_used: float
    child: str | None = None


def reuse_threshold(depth: int, tau0: float = 0.55, tau_step: float = 0.05, tau_cap: float = 0.95) -> float:
    return min(tau0 + tau_step * depth, tau_cap)


def acttree_lookup(
    tree: ActTree,
    current_fingerprint: str,
    task_embedding: np.ndarray,
    depth: int,
    tau0: float = 0.55,
    tau_step: float = 0.05,
    tau_cap: float = 0.95,
) -> ReuseDecision:
    """Pick the most task-similar edge out of the current node, or miss.

    Ties: higher similarity, then longer task_list, then lexicographic child.
    """
    threshold = reuse_threshold(depth, tau0, tau_step, tau_cap)
    node = tree.nodes.get(current_fingerprint)
    if node is None or not node.edges:
        return ReuseDecision(Verdict.MISS, None, depth, 0.0, threshold)
    scored = [
        (max((embedding.cosine(task_embedding, e) for e in edge.task_embeddings), default=0.0), edge)
        for edge in node.edges
    ]
    scored.sort(key=lambda se: (-se[0], -len(se[1].task_list), se[1].child))
    best_sim, best_edge = scored[0]
    if best_sim >= threshold:
        return ReuseDecision(Verdict.REUSE, best_edge.action, depth, best_sim, threshold, best_edge.child)
    return ReuseDecision(Verdict.MISS, None, depth, best_sim, threshold)


def acttree_record(tree: ActTree, fp: str, summary: str, action: Action, child_fp: str, task: str, task_embedding: np.ndarray) -> ActTreeEdge:
    """Merge one (state, action, child) step into the tree."""
    if tree.root is None:
        tree.root = fp
    node = tree.nodes.setdefault(fp, ActTreeNode(summary))
    edge = tree.find_edge(fp, action)
    if edge is None:
        edge = ActTreeEdge(action=action, child=child_fp)
        node.edges.append(edge)
    else:
        edge.action = action  # refresh the stored snapshot (text may have drifted)
    if task not in edge.task_list:
        edge.task_list.append(task)
        edge.task_embeddings.append(task_embedding)
    return edge


def acttree_invalidate(tree: ActTree, fp: str, action: Action, failed_task: str) -> bool:
    """Drop a stale edge, or just the failed task when others still support it.

    Returns True when the edge itself was removed.
    """
    node = tree.nodes.get(fp)
    edge = tree.find_edge(fp, action)
    if node is None or edge is None:
        return False
    if failed_task in edge.task_list:
        i = edge.task_list.index(failed_task)
        edge.task_list.pop(i)
        edge.task_embeddings.pop(i)
    if not edge.task_list:
        node.edges.remove(edge)
        tree.prune_unreachable()
        return True
    return False


# -- ActChain -----------------------------------------------------------------


@dataclass
class ChainVariant:
    params: dict[str, str]
    action: Action


@dataclass
class ChainEntry:
    step_index: int
    kind: StepKind
    variants: list[ChainVariant] = field(default_factory=list)


@dataclass
class ActChain:
    template_id: str
    entries: list[ChainEntry] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)  # validation conflicts, newest last

    def entry(self, step_index: int) -> ChainEntry | None:
        for e in self.entries:
            if e.step_index == step_index:
                return e
        return None

    def variant_count(self) -> int:
        return sum(len(e.variants) for e in self.entries)


def _norm_params(params: dict[str, str]) -> dict[str, str]:
    return {k: v.strip() for k, v in params.items()}


def actchain_lookup(chain: ActChain, step_index: int, param_values: dict[str, str]) -> Action | None:
    """Cached action for a step, or None. Variable steps need exact params."""
    entry = chain.entry(step_index)
    if entry is None or not entry.variants:
        return None
    if entry.kind is StepKind.INVARIANT:
        return entry.variants[0].action
    wanted = _norm_params(param_values)
    for variant in entry.variants:
        if _norm_params(variant.params) == wanted:
            return variant.action
    return None


def actchain_record(
    chain: ActChain, step_index: int, kind: StepKind, param_values: dict[str, str], action: Action
) -> None:
    """Insert or validate one step->action mapping from a verified, successful run.

    A conflicting action on an invariant step raises a validation flag; the
    newer action then replaces the cached one (the run it came from succeeded).
    """
    entry = chain.entry(step_index)
    if entry is None:
        entry = ChainEntry(step_index, kind)
        chain.entries.append(entry)
        chain.entries.sort(key=lambda e: e.step_index)
    if kind is StepKind.INVARIANT:
        if not entry.variants:
            entry.variants.append(ChainVariant({}, action))
        elif entry.variants[0].action.identity() != action.identity():
            chain.flags.append(f"invariant step {step_index}: cached action replaced after a verified run")
            entry.variants = [ChainVariant({}, action)]
        return
    wanted = _norm_params(param_values)
    for variant in entry.variants:
        if _norm_params(variant.params) == wanted:
            if variant.action.identity() != action.identity():
                chain.flags.append(f"variable step {step_index}: variant {wanted} replaced after a verified run")
                variant.action = action
            return
    entry.variants.append(ChainVariant(dict(wanted), action))


def actchain_invalidate(chain: ActChain, step_index: int, param_values: dict[str, str]) -> bool:
    entry = chain.entry(step_index)
    if entry is None:
        return False
    if entry.kind is StepKind.INVARIANT:
        had = bool(entry.variants)
        entry.variants = []
        return had
    wanted = _norm_params(param_values)
    for variant in list(entry.variants):
        if _norm_params(variant.params) == wanted:
            entry.variants.remove(variant)
            return True
    return False


# -- verification --------------------------------------------------------------


def verify_action(
    action: Action,
    current_state: UIState,
    weights: tuple[float, float, float] = (0.5, 0.2, 0.3),
    threshold: float = 0.8,
) -> Action | None:
    """Rebind a cached action to the live screen, or None when stale."""
    if action.target is None:
        return action
    match: Match | None = fuzzy_match(action.target, current_state, weights, threshold)
    if match is None:
        return None
    rebound = Action(
        kind=action.kind,
        target=type(action.target)(
            resource_id=match.element.resource_id,
            class_name=match.element.class_name,
            text=match.element.text,
            path=match.path,
        ),
        params=dict(action.params),
        output_slot=action.output_slot,
    )
    return rebound


def rollback_and_update(memories, task: str, failed_action: Action, operator, env, session) -> None:
    """Discard the stale cache entry; the operator drives the remaining steps.

    The fresh suffix is recorded through the open session and merged back at
    finalize time by the caller. ``memories`` only needs the cache the failed
    action came from; invalidation happens via the session's stale context.
    """
    ctx = session.stale_context
    if ctx is None:
        raise ValueError("no stale context to roll back")
    if ctx["source"] == "acttree":
        acttree_invalidate(memories.acttree(ctx["app_id"]), ctx["fingerprint"], failed_action, task)
    else:
        actchain_invalidate(memories.actchain(ctx["template_id"]), ctx["step_index"], ctx["params"])
    session.stale_context = None


def reuse_rate(trace: TraceRecord) -> float:
    """Fraction of steps replayed from caches rather than generated."""
    if not trace.annotations:
        return 0.0
    reused = sum(1 for o in trace.annotations if o in (StepOrigin.ACTTREE_REUSE, StepOrigin.ACTCHAIN_REUSE))
    return reused / len(trace.annotations)


# -- persistence ----------------------------------------------------------------


def save_acttree(tree: ActTree, path: Path) -> None:
    doc = {
        "app_id": tree.app_id,
        "root": tree.root,
        "nodes": {
            fp: {
                "summary": node.summary,
                "edges": [
                    {"action": e.action.to_dict(), "child": e.child, "task_list": list(e.task_list)}
                    for e in node.edges
                ],
            }
            for fp, node in sorted(tree.nodes.items())
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_acttree(path: Path, embedder: embedding.HashEmbedder | None = None) -> ActTree:
    embedder = embedder or embedding.HashEmbedder()
    try:
        doc = json.loads(Path(path).read_text())
        tree = ActTree(app_id=doc["app_id"], root=doc.get("root"))
        for fp, nd in doc["nodes"].items():
            node = ActTreeNode(nd.get("summary", ""))
            for ed in nd["edges"]:
                node.edges.append(
                    ActTreeEdge(
                        action=Action.from_dict(ed["action"]),
                        child=ed["child"],
                        task_list=list(ed["task_list"]),
                        task_embeddings=[embedder.embed(t) for t in ed["task_list"]],
                    )
                )
            tree.nodes[fp] = node
        return tree
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptFile(f"bad acttree file {path}: {e}") from None


def save_actchain(chain: ActChain, path: Path) -> None:
    doc = {
        "template_id": chain.template_id,
        "flags": list(chain.flags),
        "entries": [
            {
                "step_index": e.step_index,
                "kind": e.kind.value,
                "variants": [{"params": dict(v.params), "action": v.action.to_dict()} for v in e.variants],
            }
            for e in chain.entries
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_actchain(path: Path) -> ActChain:
    try:
        doc = json.loads(Path(path).read_text())
        chain = ActChain(template_id=doc["template_id"], flags=list(doc.get("flags", [])))
        for ed in doc["entries"]:
            chain.entries.append(
                ChainEntry(
                    step_index=ed["step_index"],
                    kind=StepKind(ed["kind"]),
                    variants=[ChainVariant(dict(v["params"]), Action.from_dict(v["action"])) for v in ed["variants"]],
                )
            )
        return chain
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptFile(f"bad actchain file {path}: {e}") from None


__all__ = [
    "ActTree",
    "ActTreeNode",
    "ActTreeEdge",
    "ActChain",
    "ChainEntry",
    "ChainVariant",
    "ReuseDecision",
    "Verdict",
    "acttree_lookup",
    "acttree_record",
    "acttree_invalidate",
    "actchain_lookup",
    "actchain_record",
    "actchain_invalidate",
    "verify_action",
    "rollback_and_update",
    "reuse_rate",
    "reuse_threshold",
    "save_acttree",
    "load_acttree",
    "save_actchain",
    "load_actchain",
]
