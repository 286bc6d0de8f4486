"""User-profile store: a two-kind graph of concepts and entities.

Edges carry no semantics; relevance between nodes is encoded purely as path
distance. Updates funnel through a single oracle call and apply atomically;
retrieval is oracle-free: embedding-picked start nodes, breadth-first
expansion, and round-robin filling of equal budget shares.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import embedding
from .embedding import VectorIndex, top_k
from .errors import CorruptFile, OracleChangeSetInvalid, SchemaVersionMismatch
from .ui_model import token_count

SCHEMA_VERSION = 1


@dataclass
class ConceptNode:
    id: str
    name: str
    embedding: np.ndarray
    entity_count: int = 0


@dataclass
class EntityNode:
    id: str
    name: str
    attributes: dict[str, str]
    embedding: np.ndarray


def _entity_text(name: str, attributes: dict[str, str]) -> str:
    parts = [name]
    for k in sorted(attributes):
        parts.append(f"{k} {attributes[k]}")
    return " ".join(parts)


class DisGraph:
    """Concept/entity graph; entities attach only to concepts."""

    def __init__(self, embedder: embedding.HashEmbedder | None = None):
        self.embedder = embedder or embedding.HashEmbedder()
        self.concepts: dict[str, ConceptNode] = {}
        self.entities: dict[str, EntityNode] = {}
        self.adjacency: dict[str, set[str]] = {}
        self.edges: set[tuple[str, str]] = set()
        self.index = VectorIndex(self.embedder.dim)
        self.pending_splits: list[str] = []

    # -- structure ---------------------------------------------------------

    def kind_of(self, node_id: str) -> str | None:
        if node_id in self.concepts:
            return "concept"
        if node_id in self.entities:
            return "entity"
        return None

    def node_count(self) -> int:
        return len(self.concepts) + len(self.entities)

    def add_concept(self, node_id: str, name: str) -> None:
        if node_id in self.entities:
            raise OracleChangeSetInvalid(f"{node_id} already exists as an entity")
        if node_id in self.concepts:
            return
        node = ConceptNode(node_id, name, self.embedder.embed(name))
        self.concepts[node_id] = node
        self.adjacency.setdefault(node_id, set())
        self.index.set(node_id, node.embedding)

    def add_entity(self, node_id: str, name: str, attributes: dict[str, str]) -> None:
        if node_id in self.concepts:
            raise OracleChangeSetInvalid(f"{node_id} already exists as a concept")
        if node_id in self.entities:
            # treated as an upsert: merge attributes, refresh the embedding
            node = self.entities[node_id]
            node.attributes.update(attributes)
            node.embedding = self.embedder.embed(_entity_text(node.name, node.attributes))
            self.index.set(node_id, node.embedding)
            return
        node = EntityNode(node_id, name, dict(attributes), self.embedder.embed(_entity_text(name, attributes)))
        self.entities[node_id] = node
        self.adjacency.setdefault(node_id, set())
        self.index.set(node_id, node.embedding)

    def patch_entity(self, node_id: str, patches: dict[str, str]) -> None:
        if node_id not in self.entities:
            raise OracleChangeSetInvalid(f"unknown entity {node_id}")
        node = self.entities[node_id]
        node.attributes.update(patches)
        node.embedding = self.embedder.embed(_entity_text(node.name, node.attributes))
        self.index.set(node_id, node.embedding)

    def _edge_kind_ok(self, a: str, b: str) -> bool:
        ka, kb = self.kind_of(a), self.kind_of(b)
        if ka is None or kb is None:
            return False
        return not (ka == "entity" and kb == "entity")

    def add_edge(self, a: str, b: str) -> None:
        if not self._edge_kind_ok(a, b):
            raise OracleChangeSetInvalid(f"illegal edge ({a}, {b})")
        key = (min(a, b), max(a, b))
        if key in self.edges:
            return
        self.edges.add(key)
        self.adjacency[a].add(b)
        self.adjacency[b].add(a)
        self._bump_entity_counts(a, b, +1)

    def remove_edge(self, a: str, b: str) -> None:
        key = (min(a, b), max(a, b))
        if key not in self.edges:
            return
        self.edges.remove(key)
        self.adjacency[a].discard(b)
        self.adjacency[b].discard(a)
        self._bump_entity_counts(a, b, -1)

    def _bump_entity_counts(self, a: str, b: str, delta: int) -> None:
        if self.kind_of(a) == "entity" and self.kind_of(b) == "concept":
            self.concepts[b].entity_count += delta
        elif self.kind_of(a) == "concept" and self.kind_of(b) == "entity":
            self.concepts[a].entity_count += delta

    def entity_neighbors(self, concept_id: str) -> list[str]:
        return sorted(n for n in self.adjacency.get(concept_id, ()) if n in self.entities)

    def validate_invariants(self) -> None:
        for a, b in self.edges:
            if self.kind_of(a) == "entity" and self.kind_of(b) == "entity":
                raise CorruptFile(f"entity-entity edge ({a}, {b})")
            if self.kind_of(a) is None or self.kind_of(b) is None:
                raise CorruptFile(f"dangling edge ({a}, {b})")
        for cid, concept in self.concepts.items():
            actual = len(self.entity_neighbors(cid))
            if concept.entity_count != actual:
                raise CorruptFile(f"{cid}: entity_count {concept.entity_count} != {actual}")


# -- change sets ------------------------------------------------------------


@dataclass
class ChangeSet:
    """Atomic profile mutation proposed by the updater oracle."""

    entity_updates: dict[str, dict[str, str]] = field(default_factory=dict)
    entity_insertions: list[dict] = field(default_factory=list)  # {id, name, attributes}
    new_edges: list[tuple[str, str]] = field(default_factory=list)
    concept_insertions: list[dict] = field(default_factory=list)  # {id, name}

    def is_empty(self) -> bool:
        return not (self.entity_updates or self.entity_insertions or self.new_edges or self.concept_insertions)

    @classmethod
    def from_dict(cls, d: dict) -> "ChangeSet":
        return cls(
            entity_updates={k: dict(v) for k, v in d.get("entity_updates", {}).items()},
            entity_insertions=[dict(e) for e in d.get("entity_insertions", [])],
            new_edges=[(e[0], e[1]) for e in d.get("new_edges", [])],
            concept_insertions=[dict(c) for c in d.get("concept_insertions", [])],
        )

    def to_dict(self) -> dict:
        return {
            "entity_updates": {k: dict(v) for k, v in self.entity_updates.items()},
            "entity_insertions": [dict(e) for e in self.entity_insertions],
            "new_edges": [list(e) for e in self.new_edges],
            "concept_insertions": [dict(c) for c in self.concept_insertions],
        }


def _validate_changeset(graph: DisGraph, cs: ChangeSet) -> None:
    staged_concepts = set(graph.concepts) | {c["id"] for c in cs.concept_insertions}
    staged_entities = set(graph.entities) | {e["id"] for e in cs.entity_insertions}
    for c in cs.concept_insertions:
        if c["id"] in staged_entities:
            raise OracleChangeSetInvalid(f"concept id {c['id']} collides with an entity")
    for e in cs.entity_insertions:
        if e["id"] in staged_concepts:
            raise OracleChangeSetInvalid(f"entity id {e['id']} collides with a concept")
    for node_id in cs.entity_updates:
        if node_id not in graph.entities:
            raise OracleChangeSetInvalid(f"update targets unknown entity {node_id}")
    for a, b in cs.new_edges:
        for end in (a, b):
            if end not in staged_concepts and end not in staged_entities:
                raise OracleChangeSetInvalid(f"edge references unknown id {end}")
        if a in staged_entities and b in staged_entities:
            raise OracleChangeSetInvalid(f"entity-entity edge ({a}, {b})")


def apply_changeset(graph: DisGraph, cs: ChangeSet) -> None:
    """Validate fully, then apply; the graph is untouched on rejection."""
    _validate_changeset(graph, cs)
    for c in cs.concept_insertions:
        graph.add_concept(c["id"], c["name"])
    for e in cs.entity_insertions:
        graph.add_entity(e["id"], e["name"], dict(e.get("attributes", {})))
    for node_id, patches in cs.entity_updates.items():
        graph.patch_entity(node_id, patches)
    for a, b in cs.new_edges:
        graph.add_edge(a, b)


# -- operations --------------------------------------------------------------


def update_profile(
    observations: list[str],
    graph: DisGraph,
    updater,
    update_k: int = 5,
    split_threshold: int = 20,
) -> ChangeSet:
    """One embedding retrieval, exactly one updater call, atomic apply.

    Raises OracleChangeSetInvalid without touching the graph; the caller keeps
    the observation batch for retry.
    """
    if not observations:
        raise ValueError("observations must be non-empty")
    query = graph.embedder.embed(" ".join(observations))
    hits = top_k(query, graph.index, update_k) if graph.node_count() else []
    context_nodes = []
    context_edges = []
    for node_id, _ in hits:
        kind = graph.kind_of(node_id)
        if kind == "concept":
            context_nodes.append({"id": node_id, "kind": kind, "name": graph.concepts[node_id].name})
        else:
            ent = graph.entities[node_id]
            context_nodes.append({"id": node_id, "kind": kind, "name": ent.name, "attributes": dict(ent.attributes)})
        for nb in sorted(graph.adjacency.get(node_id, ())):
            context_edges.append((node_id, nb))

    before = {cid: c.entity_count for cid, c in graph.concepts.items()}
    cs = updater.propose(context_nodes, context_edges, observations)
    apply_changeset(graph, cs)

    for cid in sorted(graph.concepts):
        if graph.concepts[cid].entity_count > split_threshold and before.get(cid, 0) <= split_threshold:
            maybe_split(cid, graph, split_threshold, updater)
    return cs


def render_node(graph: DisGraph, node_id: str) -> str:
    if node_id in graph.concepts:
        return f"[{graph.concepts[node_id].name}]"
    ent = graph.entities[node_id]
    attrs = "; ".join(f"{k}={ent.attributes[k]}" for k in sorted(ent.attributes))
    return f"{ent.name}: {attrs}" if attrs else ent.name


@dataclass
class Bucket:
    start_id: str
    items: list[tuple[str, str, int]] = field(default_factory=list)  # (node id, text, hop)
    tokens: int = 0


@dataclass
class ProfileContext:
    buckets: list[Bucket] = field(default_factory=list)
    total_tokens: int = 0
    bfs_visited: int = 0

    def node_ids(self) -> list[str]:
        return [nid for b in self.buckets for nid, _, _ in b.items]

    def rendered(self) -> str:
        return " ".join(text for b in self.buckets for _, text, _ in b.items)

    def is_empty(self) -> bool:
        return all(not b.items for b in self.buckets)


def _bfs_from(graph: DisGraph, start: str) -> Iterator[tuple[str, int]]:
    """Lazy level-order walk; ids sorted within each hop level."""
    seen = {start}
    level = [start]
    hop = 0
    while level:
        for node_id in level:
            yield node_id, hop
        nxt = sorted({nb for nid in level for nb in graph.adjacency.get(nid, ()) if nb not in seen})
        seen.update(nxt)
        level = nxt
        hop += 1


def retrieve_profile(task_text: str, graph: DisGraph, k: int = 3, token_budget: int = 2000) -> ProfileContext:
    """Zero-oracle retrieval: top-k starts, BFS per start, round-robin shares.

    Each start owns ceil(budget / k) tokens. One node is emitted per turn; a
    node another start already emitted is skipped; a node that would overflow
    the share (or the total budget) closes its bucket. Expansion is lazy, so
    the number of visited nodes depends on the budget, not the graph size.
    """
    if k < 1 or token_budget < 1:
        raise ValueError("k and token_budget must be >= 1")
    context = ProfileContext()
    if graph.node_count() == 0:
        return context
    starts = top_k(graph.embedder.embed(task_text), graph.index, k)
    if not starts:
        return context
    share = math.ceil(token_budget / k)
    walkers = [_bfs_from(graph, sid) for sid, _ in starts]
    buckets = [Bucket(start_id=sid) for sid, _ in starts]
    open_flags = [True] * len(buckets)
    emitted: set[str] = set()
    while any(open_flags):
        for i, bucket in enumerate(buckets):
            if not open_flags[i]:
                continue
            node_id, hop = None, 0
            for nid, h in walkers[i]:
                context.bfs_visited += 1
                if nid not in emitted:
                    node_id, hop = nid, h
                    break
            if node_id is None:
                open_flags[i] = False
                continue
            text = render_node(graph, node_id)
            tokens = token_count(text)
            if bucket.tokens + tokens > share or context.total_tokens + tokens > token_budget:
                open_flags[i] = False
                continue
            emitted.add(node_id)
            bucket.items.append((node_id, text, hop))
            bucket.tokens += tokens
            context.total_tokens += tokens
    context.buckets = buckets
    return context


@dataclass
class SplitResult:
    concept_id: str
    applied: bool
    subconcepts: list[str] = field(default_factory=list)
    reason: str = ""


def maybe_split(concept_id: str, graph: DisGraph, threshold: int, updater) -> SplitResult | None:
    """Split an overpopulated concept into oracle-proposed subconcepts.

    An invalid proposal leaves the graph untouched and flags the concept for
    retry instead of raising.
    """
    if concept_id not in graph.concepts:
        raise KeyError(concept_id)
    if graph.concepts[concept_id].entity_count <= threshold:
        return None
    members = graph.entity_neighbors(concept_id)
    proposal = updater.propose_split(
        {"id": concept_id, "name": graph.concepts[concept_id].name},
        [{"id": e, "name": graph.entities[e].name, "attributes": dict(graph.entities[e].attributes)} for e in members],
    )
    subconcepts = proposal.get("subconcepts", [])
    assignment = proposal.get("assignment", {})
    sub_ids = [s["id"] for s in subconcepts]
    ok = (
        len(sub_ids) == len(set(sub_ids))
        and all(graph.kind_of(sid) is None for sid in sub_ids)
        and sorted(assignment) == members
        and all(target in sub_ids for target in assignment.values())
    )
    if not ok:
        if concept_id not in graph.pending_splits:
            graph.pending_splits.append(concept_id)
        return SplitResult(concept_id, applied=False,
                           reason="entities unassigned or assigned outside the proposed subconcepts")
    for sub in subconcepts:
        graph.add_concept(sub["id"], sub["name"])
        graph.add_edge(sub["id"], concept_id)
    for entity_id, target in assignment.items():
        graph.remove_edge(entity_id, concept_id)
        graph.add_edge(entity_id, target)
    if concept_id in graph.pending_splits:
        graph.pending_splits.remove(concept_id)
    return SplitResult(concept_id, applied=True, subconcepts=sub_ids)


# -- persistence --------------------------------------------------------------


def save_graph(graph: DisGraph, path: Path) -> None:
    doc = {
        "schema": SCHEMA_VERSION,
        "concepts": [{"id": c.id, "name": c.name} for c in sorted(graph.concepts.values(), key=lambda n: n.id)],
        "entities": [
            {"id": e.id, "name": e.name, "attributes": dict(sorted(e.attributes.items()))}
            for e in sorted(graph.entities.values(), key=lambda n: n.id)
        ],
        "edges": sorted([list(e) for e in graph.edges]),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_graph(path: Path, embedder: embedding.HashEmbedder | None = None) -> DisGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except (ValueError, OSError) as e:
        raise CorruptFile(f"unreadable graph file {path}: {e}") from None
    if not isinstance(doc, dict) or "schema" not in doc:
        raise CorruptFile(f"{path}: not a graph document")
    if doc["schema"] != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"{path}: schema {doc['schema']} != {SCHEMA_VERSION}")
    graph = DisGraph(embedder)
    try:
        for c in doc["concepts"]:
            graph.add_concept(c["id"], c["name"])
        for e in doc["entities"]:
            graph.add_entity(e["id"], e["name"], dict(e.get("attributes", {})))
        for a, b in doc["edges"]:
            if graph.kind_of(a) == "entity" and graph.kind_of(b) == "entity":
                raise CorruptFile(f"{path}: entity-entity edge ({a}, {b})")
            graph.add_edge(a, b)
    except (KeyError, TypeError, OracleChangeSetInvalid) as e:
        raise CorruptFile(f"{path}: {e}") from None
    graph.validate_invariants()
    return graph
