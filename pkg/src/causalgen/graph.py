"""Typed causal concept graph: validation, reachability, intervention bookkeeping.

A graph is a set of named concepts plus directed cause->effect edges that must
form a DAG. All types are immutable values; operations are pure functions, so
everything here is safe to share across threads.

JSON serialization mirrors the extractor output schema keys exactly
("concepts", "relationships", "scene_summary").
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import (
    CycleDetected,
    DuplicateId,
    EmptyConceptSet,
    EmptyNewValue,
    EmptyValue,
    UnknownConcept,
    UnknownEndpoint,
)


@dataclass(frozen=True)
class Concept:
    """A single causal variable: a short id, a label, and its current state."""

    id: str
    name: str
    current_value: str
    description: str = ""


@dataclass(frozen=True)
class CausalEdge:
    """A directed cause -> effect link between two concept ids."""

    id: str
    cause_id: str
    effect_id: str
    description: str = ""


@dataclass(frozen=True)
class ConceptGraph:
    """Validated concept set plus acyclic edge relation. Build via validate_graph."""

    concepts: tuple[Concept, ...]
    edges: tuple[CausalEdge, ...]
    scene_summary: str = ""

    def concept_ids(self) -> list[str]:
        return [c.id for c in self.concepts]

    def concept(self, concept_id: str) -> Concept:
        for c in self.concepts:
            if c.id == concept_id:
                return c
        raise UnknownConcept(f"no concept with id {concept_id!r}")

    def has_concept(self, concept_id: str) -> bool:
        return any(c.id == concept_id for c in self.concepts)

    def children(self, concept_id: str) -> list[str]:
        return [e.effect_id for e in self.edges if e.cause_id == concept_id]

    def fingerprint(self) -> str:
        """Stable short content hash, used as graph_ref by counterfactual states."""
        payload = json.dumps(to_json_dict(self), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class CounterfactualState:
    """Concept valuations after an intervention has been applied and propagated."""

    assignments: dict[str, str]
    target_id: str
    graph_ref: str = ""


def _as_concept(raw: Concept | Mapping, index: int) -> Concept:
    if isinstance(raw, Concept):
        return raw
    return Concept(
        id=str(raw.get("id", "")).strip(),
        name=str(raw.get("name", "")).strip(),
        current_value=str(raw.get("current_value", "")).strip(),
        description=str(raw.get("description", "")).strip(),
    )


def _as_edge(raw: CausalEdge | Mapping, index: int) -> CausalEdge:
    if isinstance(raw, CausalEdge):
        return raw
    return CausalEdge(
        id=str(raw.get("id", "")).strip(),
        cause_id=str(raw.get("cause_id", "")).strip(),
        effect_id=str(raw.get("effect_id", "")).strip(),
        description=str(raw.get("description", "")).strip(),
    )


def find_cycle(concept_ids: list[str], edges: Iterable[CausalEdge]) -> list[str] | None:
    """Return one cycle as an id path [a, b, ..., a], or None if acyclic.

    Depth-first search in edge-list order, so the reported cycle is
    deterministic for a given input.
    """
    adjacency: dict[str, list[str]] = {cid: [] for cid in concept_ids}
    for e in edges:
        adjacency[e.cause_id].append(e.effect_id)

    WHITE, GRAY, BLACK = 0, 1, 2
    color = {cid: WHITE for cid in concept_ids}

    def visit(node: str, stack: list[str]) -> list[str] | None:
        color[node] = GRAY
        stack.append(node)
        for nxt in adjacency[node]:
            if color[nxt] == GRAY:
                loop_start = stack.index(nxt)
                return stack[loop_start:] + [nxt]
            if color[nxt] == WHITE:
                found = visit(nxt, stack)
                if found is not None:
                    return found
        stack.pop()
        color[node] = BLACK
        return None

    for cid in concept_ids:
        if color[cid] == WHITE:
            found = visit(cid, [])
            if found is not None:
                return found
    return None


def validate_graph(
    raw_concepts: Iterable[Concept | Mapping],
    raw_edges: Iterable[CausalEdge | Mapping],
    summary: str = "",
) -> ConceptGraph:
    """Build a ConceptGraph, enforcing every structural invariant.

    Raises EmptyConceptSet, DuplicateId, EmptyValue, UnknownEndpoint, or
    CycleDetected. Validation is idempotent: re-validating a valid graph's own
    concepts and edges returns an equal graph.
    """
    concepts = [_as_concept(c, i) for i, c in enumerate(raw_concepts)]
    edges = [_as_edge(e, i) for i, e in enumerate(raw_edges)]

    if not concepts:
        raise EmptyConceptSet("graph has no concepts")

    seen_ids: set[str] = set()
    for i, c in enumerate(concepts):
        if not c.id:
            raise EmptyValue(f"concepts[{i}].id")
        if not c.name:
            raise EmptyValue(f"concepts[{i}].name")
        if not c.current_value:
            raise EmptyValue(f"concepts[{i}].current_value")
        if c.id in seen_ids:
            raise DuplicateId(f"duplicate concept id {c.id!r}")
        seen_ids.add(c.id)

    edge_ids: set[str] = set()
    for i, e in enumerate(edges):
        if not e.id:
            raise EmptyValue(f"relationships[{i}].id")
        if e.id in edge_ids:
            raise DuplicateId(f"duplicate edge id {e.id!r}")
        edge_ids.add(e.id)
        for endpoint in (e.cause_id, e.effect_id):
            if endpoint not in seen_ids:
                raise UnknownEndpoint(
                    f"edge {e.id!r} references unknown concept {endpoint!r}"
                )

    cycle = find_cycle([c.id for c in concepts], edges)
    if cycle is not None:
        raise CycleDetected(cycle)

    return ConceptGraph(
        concepts=tuple(concepts), edges=tuple(edges), scene_summary=str(summary).strip()
    )


def prune_back_edges(
    raw_concepts: Iterable[Concept | Mapping],
    raw_edges: Iterable[CausalEdge | Mapping],
) -> tuple[list[CausalEdge], list[CausalEdge]]:
    """Drop the back edges found by DFS in edge-list order; return (kept, dropped).

    Last-resort repair for cyclic model output: edges are admitted one at a
    time in list order and an edge is dropped iff it closes a cycle with the
    edges admitted so far. Deterministic by construction.
    """
    concepts = [_as_concept(c, i) for i, c in enumerate(raw_concepts)]
    ids = [c.id for c in concepts]
    kept: list[CausalEdge] = []
    dropped: list[CausalEdge] = []
    for i, raw in enumerate(raw_edges):
        e = _as_edge(raw, i)
        if find_cycle(ids, kept + [e]) is None:
            kept.append(e)
        else:
            dropped.append(e)
    return kept, dropped


def _require_concept(g: ConceptGraph, concept_id: str) -> None:
    if not g.has_concept(concept_id):
        raise UnknownConcept(f"no concept with id {concept_id!r}")


def descendants(g: ConceptGraph, concept_id: str) -> set[str]:
    """Ids reachable from concept_id by one or more edges; excludes the id itself."""
    _require_concept(g, concept_id)
    reached: set[str] = set()
    frontier = [concept_id]
    while frontier:
        node = frontier.pop()
        for child in g.children(node):
            if child not in reached:
                reached.add(child)
                frontier.append(child)
    return reached


def non_descendants(g: ConceptGraph, concept_id: str) -> set[str]:
    """All concept ids minus descendants(g, concept_id) minus the id itself."""
    _require_concept(g, concept_id)
    reached = descendants(g, concept_id)
    return {cid for cid in g.concept_ids() if cid != concept_id and cid not in reached}


def topological_order(g: ConceptGraph) -> list[str]:
    """Every edge goes forward in the result; ties broken by concept list position."""
    order_index = {cid: i for i, cid in enumerate(g.concept_ids())}
    indegree = {cid: 0 for cid in order_index}
    for e in g.edges:
        indegree[e.effect_id] += 1

    result: list[str] = []
    remaining = set(order_index)
    while remaining:
        ready = [cid for cid in remaining if indegree[cid] == 0]
        nxt = min(ready, key=lambda cid: order_index[cid])
        result.append(nxt)
        remaining.remove(nxt)
        for child in g.children(nxt):
            indegree[child] -= 1
    return result


def apply_intervention(
    g: ConceptGraph,
    base_values: Mapping[str, str],
    target_id: str,
    new_value: str,
    propagated: Iterable[tuple[str, str]] = (),
) -> tuple[CounterfactualState, list[str]]:
    """Override base values with the do-value plus propagated descendant changes.

    Propagated pairs whose id is not a strict descendant of the target are
    dropped and reported in the returned warning list; non-descendants must be
    preserved. Returns (state, warnings).
    """
    _require_concept(g, target_id)
    if not str(new_value).strip():
        raise EmptyNewValue(f"empty new value for target {target_id!r}")
    for cid in g.concept_ids():
        if cid not in base_values:
            raise UnknownConcept(f"base_values missing concept {cid!r}")
    for cid in base_values:
        if not g.has_concept(cid):
            raise UnknownConcept(f"base_values names unknown concept {cid!r}")

    allowed = descendants(g, target_id)
    assignments = {cid: str(base_values[cid]) for cid in g.concept_ids()}
    assignments[target_id] = str(new_value).strip()

    warnings: list[str] = []
    for cid, value in propagated:
        if cid in allowed:
            assignments[cid] = str(value).strip()
        else:
            warnings.append(
                f"dropped propagated change to {cid!r}: not a descendant of {target_id!r}"
            )
    state = CounterfactualState(
        assignments=assignments, target_id=target_id, graph_ref=g.fingerprint()
    )
    return state, warnings


# --- JSON serialization ----------------------------------------------------


def to_json_dict(g: ConceptGraph) -> dict:
    return {
        "concepts": [
            {
                "id": c.id,
                "name": c.name,
                "current_value": c.current_value,
                "description": c.description,
            }
            for c in g.concepts
        ],
        "relationships": [
            {
                "id": e.id,
                "cause_id": e.cause_id,
                "effect_id": e.effect_id,
                "description": e.description,
            }
            for e in g.edges
        ],
        "scene_summary": g.scene_summary,
    }


def from_json_dict(data: Mapping) -> ConceptGraph:
    return validate_graph(
        data.get("concepts", []),
        data.get("relationships", []),
        data.get("scene_summary", ""),
    )


def state_to_json_dict(state: CounterfactualState) -> dict:
    return {
        "assignments": dict(state.assignments),
        "target_id": state.target_id,
        "graph_ref": state.graph_ref,
    }
